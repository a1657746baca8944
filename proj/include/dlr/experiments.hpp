#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlr/integrators.hpp"

namespace dlr {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MeasureSpec {
  enum class Type { gauss_legendre, monte_carlo };
  Type type = Type::gauss_legendre;
  int n_per_dim = 9;   // gauss_legendre
  int n_samples = 50;  // monte_carlo
  std::uint64_t seed = 1234;
};

struct ExperimentConfig {
  double a0 = 0.3;
  int M = 2;
  MeasureSpec measure;
  int n_per_side = 7;
  int R = 3;
  Scheme scheme = Scheme::semi_implicit;
  ProjectionMode projection_mode = ProjectionMode::gauss_seidel;
  ForcingRule forcing_rule = ForcingRule::left;
  double dt = 0.1;
  FixedPointConfig implicit_fp;
  long max_steps = 200000;
  double stop_energy = 1e-10;
  double blowup_energy = 1e4;
  double max_wall_seconds = 0.0;  // 0 disables the wall-clock guard
  std::string output_dir = "out";
};

// --- enum <-> string ---

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::explicit_euler: return "explicit";
    case Scheme::semi_implicit: return "semi_implicit";
    case Scheme::implicit_euler: return "implicit";
  }
  return "?";
}
inline std::string to_string(ProjectionMode m) {
  return m == ProjectionMode::gauss_seidel ? "gauss_seidel" : "fully_explicit";
}
inline std::string to_string(ForcingRule r) {
  return r == ForcingRule::left ? "left" : "right";
}

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "explicit") return Scheme::explicit_euler;
  if (s == "semi_implicit") return Scheme::semi_implicit;
  if (s == "implicit") return Scheme::implicit_euler;
  throw ConfigError("scheme.name: unknown scheme '" + s +
                    "' (expected explicit|semi_implicit|implicit)");
}
inline ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "gauss_seidel") return ProjectionMode::gauss_seidel;
  if (s == "fully_explicit") return ProjectionMode::fully_explicit;
  throw ConfigError("scheme.projection_mode: unknown mode '" + s +
                    "' (expected gauss_seidel|fully_explicit)");
}
inline ForcingRule forcing_rule_from_string(const std::string& s) {
  if (s == "left") return ForcingRule::left;
  if (s == "right") return ForcingRule::right;
  throw ConfigError("scheme.forcing_rule: unknown rule '" + s +
                    "' (expected left|right)");
}

// --- config parsing ---

namespace detail {
inline const nlohmann::json& require_key(const nlohmann::json& j,
                                         const std::string& key,
                                         const std::string& path) {
  if (!j.contains(key))
    throw ConfigError("missing config field: " + path);
  return j.at(key);
}
template <class T>
inline T get_as(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field has wrong type: " + path);
  }
}
}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::get_as;
  using detail::require_key;
  ExperimentConfig c;
  const auto& model = require_key(j, "model", "model");
  c.a0 = get_as<double>(require_key(model, "a0", "model.a0"), "model.a0");
  c.M = get_as<int>(require_key(model, "M", "model.M"), "model.M");
  const auto& meas = require_key(model, "measure", "model.measure");
  const std::string mtype = get_as<std::string>(
      require_key(meas, "type", "model.measure.type"), "model.measure.type");
  if (mtype == "gl" || mtype == "gauss_legendre") {
    c.measure.type = MeasureSpec::Type::gauss_legendre;
    c.measure.n_per_dim = get_as<int>(
        require_key(meas, "n", "model.measure.n"), "model.measure.n");
  } else if (mtype == "mc" || mtype == "monte_carlo") {
    c.measure.type = MeasureSpec::Type::monte_carlo;
    c.measure.n_samples = get_as<int>(
        require_key(meas, "N", "model.measure.N"), "model.measure.N");
    if (meas.contains("seed"))
      c.measure.seed =
          get_as<std::uint64_t>(meas.at("seed"), "model.measure.seed");
  } else {
    throw ConfigError("model.measure.type: unknown type '" + mtype +
                      "' (expected gl|mc)");
  }
  const auto& space = require_key(j, "space", "space");
  c.n_per_side = get_as<int>(
      require_key(space, "n_per_side", "space.n_per_side"), "space.n_per_side");
  const auto& dlrj = require_key(j, "dlr", "dlr");
  c.R = get_as<int>(require_key(dlrj, "R", "dlr.R"), "dlr.R");
  const auto& scheme = require_key(j, "scheme", "scheme");
  c.scheme = scheme_from_string(get_as<std::string>(
      require_key(scheme, "name", "scheme.name"), "scheme.name"));
  c.forcing_rule =
      c.scheme == Scheme::implicit_euler ? ForcingRule::right : ForcingRule::left;
  if (scheme.contains("projection_mode"))
    c.projection_mode = projection_mode_from_string(get_as<std::string>(
        scheme.at("projection_mode"), "scheme.projection_mode"));
  if (scheme.contains("forcing_rule"))
    c.forcing_rule = forcing_rule_from_string(
        get_as<std::string>(scheme.at("forcing_rule"), "scheme.forcing_rule"));
  c.dt = get_as<double>(require_key(scheme, "dt", "scheme.dt"), "scheme.dt");
  if (scheme.contains("implicit_fp")) {
    const auto& fp = scheme.at("implicit_fp");
    if (fp.contains("max_iters"))
      c.implicit_fp.max_iters =
          get_as<int>(fp.at("max_iters"), "scheme.implicit_fp.max_iters");
    if (fp.contains("tol"))
      c.implicit_fp.tol = get_as<double>(fp.at("tol"), "scheme.implicit_fp.tol");
  }
  if (j.contains("run")) {
    const auto& run = j.at("run");
    if (run.contains("max_steps"))
      c.max_steps = get_as<long>(run.at("max_steps"), "run.max_steps");
    if (run.contains("stop_energy"))
      c.stop_energy =
          get_as<double>(run.at("stop_energy"), "run.stop_energy");
    if (run.contains("blowup_energy"))
      c.blowup_energy =
          get_as<double>(run.at("blowup_energy"), "run.blowup_energy");
    if (run.contains("max_wall_seconds"))
      c.max_wall_seconds =
          get_as<double>(run.at("max_wall_seconds"), "run.max_wall_seconds");
  }
  if (j.contains("output")) {
    const auto& out = j.at("output");
    if (out.contains("dir"))
      c.output_dir = get_as<std::string>(out.at("dir"), "output.dir");
  }

  // validation
  if (!(c.a0 > 0)) throw ConfigError("model.a0 must be positive");
  if (c.M < 2)
    throw ConfigError(
        "model.M must be >= 2 (the shipped initial condition uses xi_1 and "
        "xi_2)");
  if (c.measure.type == MeasureSpec::Type::gauss_legendre &&
      c.measure.n_per_dim < 1)
    throw ConfigError("model.measure.n must be >= 1");
  if (c.measure.type == MeasureSpec::Type::monte_carlo && c.measure.n_samples < 1)
    throw ConfigError("model.measure.N must be >= 1");
  if (c.n_per_side < 2) throw ConfigError("space.n_per_side must be >= 2");
  if (c.R < 1) throw ConfigError("dlr.R must be >= 1");
  const long n_samples = c.measure.type == MeasureSpec::Type::gauss_legendre
                             ? static_cast<long>(std::llround(
                                   std::pow(c.measure.n_per_dim, c.M)))
                             : c.measure.n_samples;
  if (c.R >= n_samples)
    throw ConfigError("dlr.R must be smaller than the number of sample points");
  if (!(c.dt > 0)) throw ConfigError("scheme.dt must be positive");
  if (c.max_steps < 0) throw ConfigError("run.max_steps must be >= 0");
  if (!(c.stop_energy > 0) || !(c.blowup_energy > 0) ||
      c.stop_energy >= c.blowup_energy)
    throw ConfigError("run.stop_energy must be positive and smaller than "
                      "run.blowup_energy");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(j);
}

inline DiscreteMeasure make_measure(const ExperimentConfig& c) {
  if (c.measure.type == MeasureSpec::Type::gauss_legendre)
    return gauss_legendre_measure(c.M, c.measure.n_per_dim);
  return monte_carlo_measure(c.M, c.measure.n_samples, c.measure.seed);
}

// The shipped initial condition (requires M >= 2):
//   u0 = 10 sin(pi x1) sin(pi x2) + 2 sin(2 pi x1) sin(2 pi x2) xi_1
//      + 2 sin(4 pi x1) sin(4 pi x2) xi_2 + 2 sin(6 pi x1) sin(6 pi x2) xi_1^2
inline Eigen::MatrixXd initial_snapshots(const FeSpace& space,
                                         const DiscreteMeasure& mu) {
  if (mu.dim() < 2)
    throw std::invalid_argument(
        "initial_snapshots: measure must have dimension >= 2");
  const double pi = 3.14159265358979323846;
  auto s = [pi](int k, double x, double y) {
    return std::sin(k * pi * x) * std::sin(k * pi * y);
  };
  Eigen::MatrixXd snaps(space.dof_count, mu.size());
  for (int k = 0; k < mu.size(); ++k) {
    const double x1 = mu.points(k, 0), x2 = mu.points(k, 1);
    for (int i = 0; i < space.dof_count; ++i) {
      const int v = space.interior_dofs[i];
      const double x = space.mesh.vertices(v, 0), y = space.mesh.vertices(v, 1);
      snaps(i, k) = 10 * s(1, x, y) + 2 * s(2, x, y) * x1 +
                    2 * s(4, x, y) * x2 + 2 * s(6, x, y) * x1 * x1;
    }
  }
  return snaps;
}

inline SchemeConfig scheme_config(const ExperimentConfig& c) {
  SchemeConfig sc;
  sc.scheme = c.scheme;
  sc.dt = c.dt;
  sc.forcing_rule = c.forcing_rule;
  sc.projection_mode = c.projection_mode;
  sc.implicit_fp = c.implicit_fp;
  return sc;
}

// --- traces and classification ---

struct TraceRow {
  long step = 0;
  double time = 0;
  double energy_norm = 0;
  double h_norm = 0;
  double v_norm = 0;
  double gram_min_sv = 0;
  int effective_rank = 0;
  int fp_iters = 0;
};

struct NormTrace {
  std::vector<TraceRow> rows;
};

enum class RunOutcome { decayed, blew_up, inconclusive };

inline std::string to_string(RunOutcome o) {
  switch (o) {
    case RunOutcome::decayed: return "decayed";
    case RunOutcome::blew_up: return "blew_up";
    case RunOutcome::inconclusive: return "inconclusive";
  }
  return "?";
}

namespace detail {
inline void gram_diagnostics(const OperatorMatrices& ops, const DlrState& s,
                             double rank_tol_factor, double& min_sv,
                             int& eff_rank) {
  const int r = s.rank();
  if (r == 0) {
    min_sv = 0;
    eff_rank = 0;
    return;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram(ops.mass, s.modes_det),
                                                    Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ev = es.eigenvalues();
  min_sv = std::max(ev(0), 0.0);
  const double thresh = std::max(ev(r - 1), 0.0) * rank_tol_factor * r;
  eff_rank = 0;
  for (int i = 0; i < r; ++i)
    if (ev(i) > thresh) ++eff_rank;
}
}  // namespace detail

struct DecayResult {
  RunOutcome outcome = RunOutcome::inconclusive;
  NormTrace trace;
  long steps = 0;
  double final_energy = 0;
  bool monotone_energy = true;
  long fp_nonconverged_steps = 0;
  ConstantsReport constants;
  DlrState final_state;
  std::shared_ptr<const HeatModel> model;
};

// Step until the energy norm reaches stop_energy (decayed), exceeds
// blowup_energy or turns non-finite (blew_up), or max_steps/wall clock runs
// out (inconclusive). Monotonicity is judged with a relative slack of 1e-12.
inline DecayResult run_decay(const ExperimentConfig& cfg,
                             std::optional<LoadedState> initial = {}) {
  DecayResult out;
  DiscreteMeasure mu = initial ? initial->measure : make_measure(cfg);
  auto model = std::make_shared<HeatModel>(make_heat_model(
      cfg.n_per_side, std::move(mu), make_cosine_diffusion(cfg.a0, cfg.M)));
  out.model = model;
  out.constants =
      estimate_constants(model->space, model->measure, model->diffusion,
                         model->ops);

  DlrState state;
  if (initial) {
    if (initial->mesh_n != cfg.n_per_side)
      throw ConfigError("loaded state mesh_n does not match space.n_per_side");
    state = initial->state;
    state.measure_id = model->measure.id;
  } else {
    state = kl_initialize(model->ops, model->measure,
                          initial_snapshots(model->space, model->measure),
                          cfg.R)
                .state;
  }

  const DlrStepper stepper(*model, scheme_config(cfg));
  const auto t_start = std::chrono::steady_clock::now();

  StateNorms norms = state_norms(model->ops, model->measure, state);
  double min_sv = 0;
  int eff_rank = 0;
  detail::gram_diagnostics(model->ops, state,
                           scheme_config(cfg).rank_tol_factor, min_sv, eff_rank);
  out.trace.rows.push_back({0, state.time, norms.energy, norms.h, norms.v,
                            min_sv, eff_rank, 0});

  long step_count = 0;
  while (true) {
    if (!std::isfinite(norms.energy) || norms.energy >= cfg.blowup_energy) {
      out.outcome = RunOutcome::blew_up;
      break;
    }
    if (norms.energy <= cfg.stop_energy) {
      out.outcome = RunOutcome::decayed;
      break;
    }
    if (step_count >= cfg.max_steps) {
      out.outcome = RunOutcome::inconclusive;
      break;
    }
    if (cfg.max_wall_seconds > 0) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        t_start)
              .count();
      if (elapsed > cfg.max_wall_seconds) {
        out.outcome = RunOutcome::inconclusive;
        break;
      }
    }
    auto res = stepper.step(state);
    state = std::move(res.state);
    ++step_count;
    const double prev_energy = norms.energy;
    norms = state_norms(model->ops, model->measure, state);
    if (!res.diag.finite || !std::isfinite(norms.energy))
      norms.energy = std::numeric_limits<double>::infinity();
    if (norms.energy > prev_energy * (1 + 1e-12)) out.monotone_energy = false;
    if (res.diag.fp_iterations > 0 && !res.diag.fp_converged)
      ++out.fp_nonconverged_steps;
    detail::gram_diagnostics(model->ops, state, stepper.config().rank_tol_factor,
                             min_sv, eff_rank);
    out.trace.rows.push_back({step_count, state.time, norms.energy, norms.h,
                              norms.v, min_sv, eff_rank,
                              res.diag.fp_iterations});
  }
  out.steps = step_count;
  out.final_energy = norms.energy;
  out.final_state = std::move(state);
  return out;
}

// --- stability sweep ---

struct SweepCell {
  int n_per_side = 0;
  double h = 0;
  double dt = 0;
  double ratio = 0;  // dt / h^2
  RunOutcome outcome = RunOutcome::inconclusive;
  long steps = 0;
  double final_energy = 0;
};

struct SweepReport {
  std::vector<SweepCell> cells;
  double k_fit = 0;
  bool k_fit_above_grid = false;
  bool both_classes_present = false;
  ConstantsReport constants;  // at the finest mesh in the sweep
};

inline double compute_k_fit(const std::vector<SweepCell>& cells,
                            bool& above_grid) {
  std::vector<double> decayed;
  for (const auto& c : cells)
    if (c.outcome == RunOutcome::decayed) decayed.push_back(c.ratio);
  std::sort(decayed.begin(), decayed.end(), std::greater<double>());
  above_grid = !cells.empty() && decayed.size() == cells.size();
  for (double r : decayed) {
    bool ok = true;
    for (const auto& c : cells)
      if (c.ratio <= r && c.outcome != RunOutcome::decayed) {
        ok = false;
        break;
      }
    if (ok) return r;
  }
  return 0.0;
}

// One run_decay per (n, dt) cell. Cells are independent; they are distributed
// over a small worker pool and the classification does not depend on the
// execution order.
inline SweepReport stability_sweep(const ExperimentConfig& base,
                                   const std::vector<int>& n_list,
                                   const std::vector<double>& dt_list,
                                   int threads = 0) {
  if (n_list.empty() || dt_list.empty())
    throw ConfigError("stability_sweep: empty n_list or dt_list");
  SweepReport report;
  struct Job {
    int n;
    double dt;
  };
  std::vector<Job> jobs;
  for (int n : n_list)
    for (double dt : dt_list) jobs.push_back({n, dt});
  report.cells.resize(jobs.size());

  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 0) threads = 1;
  threads = std::min<int>(threads, static_cast<int>(jobs.size()));

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) break;
      ExperimentConfig cfg = base;
      cfg.n_per_side = jobs[i].n;
      cfg.dt = jobs[i].dt;
      const DecayResult r = run_decay(cfg);
      SweepCell& cell = report.cells[i];
      cell.n_per_side = jobs[i].n;
      cell.h = 1.0 / jobs[i].n;
      cell.dt = jobs[i].dt;
      cell.ratio = jobs[i].dt * jobs[i].n * jobs[i].n;
      cell.outcome = r.outcome;
      cell.steps = r.steps;
      cell.final_energy = r.final_energy;
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  report.k_fit = compute_k_fit(report.cells, report.k_fit_above_grid);
  bool any_decay = false, any_blow = false;
  for (const auto& c : report.cells) {
    any_decay |= c.outcome == RunOutcome::decayed;
    any_blow |= c.outcome == RunOutcome::blew_up;
  }
  report.both_classes_present = any_decay && any_blow;

  ExperimentConfig fine = base;
  fine.n_per_side = *std::max_element(n_list.begin(), n_list.end());
  auto model = make_heat_model(fine.n_per_side, make_measure(fine),
                               make_cosine_diffusion(fine.a0, fine.M));
  report.constants =
      estimate_constants(model.space, model.measure, model.diffusion, model.ops);
  return report;
}

// --- scheme comparison (Algorithm 1 vs projector splitting) ---

struct CompareRow {
  long step = 0;
  double time = 0;
  double rel_diff = 0;
  double energy_alg1 = 0;
  double energy_alg2 = 0;
};

struct CompareSchemesResult {
  std::vector<CompareRow> rows;
  double max_rel_diff = 0;
  bool monotone_alg1 = true;
  bool monotone_alg2 = true;
};

inline CompareSchemesResult compare_schemes(const ExperimentConfig& cfg,
                                            long steps) {
  CompareSchemesResult out;
  auto model = make_heat_model(cfg.n_per_side, make_measure(cfg),
                               make_cosine_diffusion(cfg.a0, cfg.M));
  const auto kl = kl_initialize(model.ops, model.measure,
                                initial_snapshots(model.space, model.measure),
                                cfg.R);
  DlrState s1 = kl.state;
  DdoState s2 = to_ddo(model.ops, kl.state);
  const DlrStepper stepper1(model, scheme_config(cfg));
  const SplittingStepper stepper2(model, scheme_config(cfg));
  const int n = model.measure.size();

  double e1_prev = state_norms(model.ops, model.measure, s1).energy;
  double e2_prev = e1_prev;
  for (long it = 1; it <= steps; ++it) {
    s1 = stepper1.step(s1).state;
    s2 = stepper2.step(s2);
    const DlrState s2d = from_ddo(s2);
    const Eigen::MatrixXd r1 = evaluate_all(s1, n);
    const Eigen::MatrixXd r2 = evaluate_all(s2d, n);
    const double denom = std::max(r1.cwiseAbs().maxCoeff(), 1e-300);
    const double rel = (r1 - r2).cwiseAbs().maxCoeff() / denom;
    const double e1 = state_norms(model.ops, model.measure, s1).energy;
    const double e2 = state_norms(model.ops, model.measure, s2d).energy;
    if (e1 > e1_prev * (1 + 1e-12)) out.monotone_alg1 = false;
    if (e2 > e2_prev * (1 + 1e-12)) out.monotone_alg2 = false;
    e1_prev = e1;
    e2_prev = e2;
    out.rows.push_back({it, s1.time, rel, e1, e2});
    out.max_rel_diff = std::max(out.max_rel_diff, rel);
    if (!std::isfinite(e1) || !std::isfinite(e2)) break;
  }
  return out;
}

// --- projection-mode comparison ---

struct ProjectionModeRun {
  double dt = 0;
  ProjectionMode mode = ProjectionMode::gauss_seidel;
  RunOutcome outcome = RunOutcome::inconclusive;
  bool monotone = true;
  long steps = 0;
  NormTrace trace;
};

inline std::vector<ProjectionModeRun> compare_projection_modes(
    const ExperimentConfig& base, const std::vector<double>& dt_list) {
  if (base.scheme != Scheme::semi_implicit)
    throw ConfigError(
        "compare-projection requires scheme.name == semi_implicit");
  std::vector<ProjectionModeRun> out;
  for (double dt : dt_list) {
    for (ProjectionMode mode :
         {ProjectionMode::gauss_seidel, ProjectionMode::fully_explicit}) {
      ExperimentConfig cfg = base;
      cfg.dt = dt;
      cfg.projection_mode = mode;
      const DecayResult r = run_decay(cfg);
      out.push_back({dt, mode, r.outcome, r.monotone_energy, r.steps, r.trace});
    }
  }
  return out;
}

// --- file output ---

namespace detail {
inline std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}
}  // namespace detail

inline void write_trace_csv(const std::string& path, const NormTrace& trace) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "step,time,energy_norm,h_norm,v_norm,gram_min_sv,effective_rank,fp_"
       "iters\n";
  for (const auto& r : trace.rows)
    f << r.step << ',' << detail::fmt17(r.time) << ','
      << detail::fmt17(r.energy_norm) << ',' << detail::fmt17(r.h_norm) << ','
      << detail::fmt17(r.v_norm) << ',' << detail::fmt17(r.gram_min_sv) << ','
      << r.effective_rank << ',' << r.fp_iters << '\n';
}

inline nlohmann::json constants_json(const ConstantsReport& c) {
  return {{"C_I", c.C_I},   {"C_B", c.C_B},       {"C_L", c.C_L},
          {"C_P", c.C_P},   {"C_det", c.C_det},   {"K_explicit", c.K_explicit}};
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace dlr
