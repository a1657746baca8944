// Command-line driver for the DLR random-heat-equation experiments.
//
// Subcommands: decay, sweep, compare-schemes, compare-projection, constants.
// Each reads a JSON config (see configs/ and the README) and writes CSV
// traces plus a report.json into the output directory.
// Exit codes: 0 success, 2 config error, 3 numerical failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlr/experiments.hpp"

namespace fs = std::filesystem;
using namespace dlr;

namespace {

nlohmann::json cell_json(const SweepCell& c) {
  return {{"n_per_side", c.n_per_side}, {"h", c.h},
          {"dt", c.dt},               {"ratio", c.ratio},
          {"outcome", to_string(c.outcome)}, {"steps", c.steps},
          {"final_energy", c.final_energy}};
}

void write_cells_csv(const std::string& path,
                     const std::vector<SweepCell>& cells) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "n_per_side,h,dt,ratio,outcome,steps,final_energy\n";
  for (const auto& c : cells)
    f << c.n_per_side << ',' << detail::fmt17(c.h) << ',' << detail::fmt17(c.dt)
      << ',' << detail::fmt17(c.ratio) << ',' << to_string(c.outcome) << ','
      << c.steps << ',' << detail::fmt17(c.final_energy) << '\n';
}

std::vector<double> default_sweep_dts() {
  // log-spaced across the quadratic stability boundary for n in [6, 16]
  std::vector<double> dts;
  const double lo = 2e-4, hi = 6e-3;
  const int count = 10;
  for (int i = 0; i < count; ++i)
    dts.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1)));
  return dts;
}

int run_decay_cmd(const ExperimentConfig& cfg, const std::string& load_path,
                  const std::string& save_path) {
  std::optional<LoadedState> init;
  if (!load_path.empty()) init = load_state(load_path);
  const DecayResult r = run_decay(cfg, init);
  fs::create_directories(cfg.output_dir);
  write_trace_csv(cfg.output_dir + "/trace.csv", r.trace);
  nlohmann::json rep{{"classification", to_string(r.outcome)},
                     {"steps", r.steps},
                     {"final_time", r.final_state.time},
                     {"final_energy", r.final_energy},
                     {"monotone_energy", r.monotone_energy},
                     {"fp_nonconverged_steps", r.fp_nonconverged_steps},
                     {"constants", constants_json(r.constants)}};
  write_json(cfg.output_dir + "/report.json", rep);
  if (!save_path.empty())
    save_state(save_path, r.final_state, r.model->space, r.model->measure);
  std::cout << "decay: " << to_string(r.outcome) << " after " << r.steps
            << " steps, final energy " << r.final_energy << "\n";
  return 0;
}

int run_sweep_cmd(const ExperimentConfig& cfg, std::vector<int> ns,
                  std::vector<double> dts, int threads) {
  if (ns.empty()) ns = {6, 8, 10, 12, 14, 16};
  if (dts.empty()) dts = default_sweep_dts();
  const SweepReport rep = stability_sweep(cfg, ns, dts, threads);
  fs::create_directories(cfg.output_dir);
  write_cells_csv(cfg.output_dir + "/cells.csv", rep.cells);
  nlohmann::json j{{"k_fit", rep.k_fit},
                   {"k_fit_above_grid", rep.k_fit_above_grid},
                   {"both_classes_present", rep.both_classes_present},
                   {"constants", constants_json(rep.constants)}};
  j["cells"] = nlohmann::json::array();
  for (const auto& c : rep.cells) j["cells"].push_back(cell_json(c));
  write_json(cfg.output_dir + "/report.json", j);
  std::cout << "sweep: " << rep.cells.size() << " cells, K_fit = " << rep.k_fit
            << (rep.k_fit_above_grid ? " (above grid)" : "") << "\n";
  return 0;
}

int run_compare_schemes_cmd(const ExperimentConfig& cfg, long steps) {
  const auto r = compare_schemes(cfg, steps);
  fs::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir + "/compare_schemes.csv");
  if (!f) throw std::runtime_error("cannot open compare_schemes.csv");
  f << "step,time,rel_diff,energy_staggered,energy_splitting\n";
  for (const auto& row : r.rows)
    f << row.step << ',' << detail::fmt17(row.time) << ','
      << detail::fmt17(row.rel_diff) << ',' << detail::fmt17(row.energy_alg1)
      << ',' << detail::fmt17(row.energy_alg2) << '\n';
  write_json(cfg.output_dir + "/report.json",
             {{"max_rel_diff", r.max_rel_diff},
              {"monotone_staggered", r.monotone_alg1},
              {"monotone_splitting", r.monotone_alg2},
              {"steps", r.rows.size()}});
  std::cout << "compare-schemes: max relative difference " << r.max_rel_diff
            << "\n";
  return 0;
}

int run_compare_projection_cmd(const ExperimentConfig& cfg,
                               std::vector<double> dts) {
  if (dts.empty()) dts = {5.0, 100.0, 200.0};
  const auto runs = compare_projection_modes(cfg, dts);
  fs::create_directories(cfg.output_dir);
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    const std::string name = "trace_" + to_string(r.mode) + "_dt" +
                             std::to_string(i / 2) + ".csv";
    write_trace_csv(cfg.output_dir + "/" + name, r.trace);
    j.push_back({{"dt", r.dt},
                 {"projection_mode", to_string(r.mode)},
                 {"outcome", to_string(r.outcome)},
                 {"monotone", r.monotone},
                 {"steps", r.steps},
                 {"trace", name}});
    std::cout << "compare-projection: dt=" << r.dt << " " << to_string(r.mode)
              << " -> " << to_string(r.outcome)
              << (r.monotone ? " (monotone)" : " (non-monotone)") << "\n";
  }
  write_json(cfg.output_dir + "/report.json", {{"runs", j}});
  return 0;
}

int run_constants_cmd(const ExperimentConfig& cfg) {
  auto model = make_heat_model(cfg.n_per_side, make_measure(cfg),
                               make_cosine_diffusion(cfg.a0, cfg.M));
  const auto c =
      estimate_constants(model.space, model.measure, model.diffusion, model.ops);
  fs::create_directories(cfg.output_dir);
  write_json(cfg.output_dir + "/report.json", {{"constants", constants_json(c)}});
  std::printf("C_I        = %.6g\n", c.C_I);
  std::printf("C_B        = %.6g\n", c.C_B);
  std::printf("C_L        = %.6g\n", c.C_L);
  std::printf("C_P        = %.6g\n", c.C_P);
  std::printf("C_det      = %.6g\n", c.C_det);
  std::printf("K_explicit = %.6g\n", c.K_explicit);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamical low-rank solver for the random heat equation"};
  app.require_subcommand(1);

  std::string config_path, output_dir, load_path, save_path;
  std::vector<int> n_list;
  std::vector<double> dt_list;
  int threads = 0;
  long steps = 50;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON experiment config")
        ->required();
    sub->add_option("--output-dir", output_dir,
                    "override the config output directory");
  };

  auto* decay = app.add_subcommand("decay", "single norm-decay run");
  add_common(decay);
  decay->add_option("--load-state", load_path,
                    "start from a saved state snapshot");
  decay->add_option("--save-state", save_path,
                    "write the final state snapshot to this path");

  auto* sweep = app.add_subcommand("sweep", "(h, dt) stability sweep");
  add_common(sweep);
  sweep->add_option("--n-list", n_list, "mesh subdivisions per cell row")
      ->delimiter(',');
  sweep->add_option("--dt-list", dt_list, "time steps per cell column")
      ->delimiter(',');
  sweep->add_option("--threads", threads, "worker threads (0 = hardware)");

  auto* cs = app.add_subcommand("compare-schemes",
                                "staggered vs projector-splitting run");
  add_common(cs);
  cs->add_option("--steps", steps, "number of steps to compare");

  auto* cp = app.add_subcommand("compare-projection",
                                "gauss-seidel vs fully explicit projection");
  add_common(cp);
  cp->add_option("--dt-list", dt_list, "time steps to compare")->delimiter(',');

  auto* cc = app.add_subcommand("constants", "print the discretization constants");
  add_common(cc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (decay->parsed()) return run_decay_cmd(cfg, load_path, save_path);
    if (sweep->parsed()) return run_sweep_cmd(cfg, n_list, dt_list, threads);
    if (cs->parsed()) return run_compare_schemes_cmd(cfg, steps);
    if (cp->parsed()) return run_compare_projection_cmd(cfg, dt_list);
    if (cc->parsed()) return run_constants_cmd(cfg);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
