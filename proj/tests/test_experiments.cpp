#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dlr/experiments.hpp"
#include "test_helpers.hpp"

using namespace dlr;

namespace {

nlohmann::json base_json() {
  return nlohmann::json{
      {"model",
       {{"a0", 0.3},
        {"M", 2},
        {"measure", {{"type", "gl"}, {"n", 3}}}}},
      {"space", {{"n_per_side", 5}}},
      {"dlr", {{"R", 2}}},
      {"scheme", {{"name", "semi_implicit"}, {"dt", 1.0}}},
      {"run", {{"max_steps", 2000}, {"stop_energy", 1e-10},
               {"blowup_energy", 1e4}}},
      {"output", {{"dir", "out"}}}};
}

}  // namespace

TEST_CASE("config parsing") {
  SECTION("valid config") {
    const auto c = parse_config(base_json());
    CHECK(c.a0 == 0.3);
    CHECK(c.M == 2);
    CHECK(c.measure.type == MeasureSpec::Type::gauss_legendre);
    CHECK(c.n_per_side == 5);
    CHECK(c.R == 2);
    CHECK(c.scheme == Scheme::semi_implicit);
    CHECK(c.projection_mode == ProjectionMode::gauss_seidel);
    CHECK(c.forcing_rule == ForcingRule::left);
    CHECK(c.dt == 1.0);
    CHECK(c.max_steps == 2000);
  }

  SECTION("missing fields name the offending path") {
    auto j = base_json();
    j["model"].erase("a0");
    CHECK_THROWS_WITH(parse_config(j),
                      Catch::Matchers::ContainsSubstring("model.a0"));
    j = base_json();
    j["scheme"].erase("dt");
    CHECK_THROWS_WITH(parse_config(j),
                      Catch::Matchers::ContainsSubstring("scheme.dt"));
    j = base_json();
    j["model"]["measure"].erase("n");
    CHECK_THROWS_WITH(parse_config(j),
                      Catch::Matchers::ContainsSubstring("model.measure.n"));
  }

  SECTION("type and value validation") {
    auto j = base_json();
    j["model"]["M"] = 1;
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = base_json();
    j["scheme"]["name"] = "magic";
    CHECK_THROWS_WITH(parse_config(j),
                      Catch::Matchers::ContainsSubstring("scheme.name"));
    j = base_json();
    j["dlr"]["R"] = 9;  // equals the number of GL samples
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = base_json();
    j["run"]["stop_energy"] = 1e5;
    CHECK_THROWS_AS(parse_config(j), ConfigError);
    j = base_json();
    j["space"]["n_per_side"] = "five";
    CHECK_THROWS_WITH(parse_config(j),
                      Catch::Matchers::ContainsSubstring("space.n_per_side"));
  }

  SECTION("implicit scheme defaults to right-sided forcing") {
    auto j = base_json();
    j["scheme"]["name"] = "implicit";
    const auto c = parse_config(j);
    CHECK(c.forcing_rule == ForcingRule::right);
  }

  SECTION("missing file") {
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }
}

TEST_CASE("run_decay classification") {
  SECTION("zero initial state decays at step zero") {
    auto c = parse_config(base_json());
    LoadedState init;
    init.mesh_n = c.n_per_side;
    init.measure = make_measure(c);
    const auto space = build_space(c.n_per_side);
    init.state.mean = Eigen::VectorXd::Zero(space.dof_count);
    init.state.modes_det = Eigen::MatrixXd::Zero(space.dof_count, c.R);
    Xoshiro256pp rng(3);
    init.state.modes_stoch =
        test::random_orthonormal_basis(init.measure, c.R, rng).columns;
    const auto r = run_decay(c, init);
    CHECK(r.outcome == RunOutcome::decayed);
    CHECK(r.steps == 0);
  }

  SECTION("semi-implicit run decays monotonically") {
    const auto c = parse_config(base_json());
    const auto r = run_decay(c);
    CHECK(r.outcome == RunOutcome::decayed);
    CHECK(r.monotone_energy);
    CHECK(r.final_energy <= c.stop_energy);
    REQUIRE(r.trace.rows.size() == static_cast<std::size_t>(r.steps + 1));
    for (std::size_t i = 1; i < r.trace.rows.size(); ++i) {
      CHECK(r.trace.rows[i].step == r.trace.rows[i - 1].step + 1);
      CHECK(r.trace.rows[i].energy_norm >= 0.0);
    }
  }

  SECTION("explicit run above the CFL threshold blows up") {
    auto j = base_json();
    j["scheme"]["name"] = "explicit";
    j["scheme"]["dt"] = 0.4 / 25.0;  // dt/h^2 = 0.4, far above the threshold
    const auto c = parse_config(j);
    const auto r = run_decay(c);
    CHECK(r.outcome == RunOutcome::blew_up);
    CHECK_FALSE(r.monotone_energy);
  }

  SECTION("max_steps produces inconclusive") {
    auto j = base_json();
    j["run"]["max_steps"] = 2;
    const auto c = parse_config(j);
    const auto r = run_decay(c);
    CHECK(r.outcome == RunOutcome::inconclusive);
    CHECK(r.steps == 2);
  }
}

TEST_CASE("trace CSV output is deterministic") {
  const auto c = parse_config(base_json());
  const auto r1 = run_decay(c);
  const auto r2 = run_decay(c);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string p1 = (dir / "dlr_trace_a.csv").string();
  const std::string p2 = (dir / "dlr_trace_b.csv").string();
  write_trace_csv(p1, r1.trace);
  write_trace_csv(p2, r2.trace);
  std::ifstream f1(p1), f2(p2);
  const std::string s1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(s1.rfind("step,time,energy_norm,h_norm,v_norm,gram_min_sv,"
                 "effective_rank,fp_iters\n",
                 0) == 0);
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("k_fit extraction") {
  auto cell = [](double ratio, RunOutcome o) {
    SweepCell c;
    c.ratio = ratio;
    c.outcome = o;
    return c;
  };
  bool above = false;

  SECTION("clean separation") {
    std::vector<SweepCell> cells = {
        cell(0.05, RunOutcome::decayed), cell(0.10, RunOutcome::decayed),
        cell(0.15, RunOutcome::decayed), cell(0.20, RunOutcome::blew_up),
        cell(0.30, RunOutcome::blew_up)};
    CHECK(compute_k_fit(cells, above) == 0.15);
    CHECK_FALSE(above);
  }

  SECTION("a stray blow-up lowers the fit") {
    std::vector<SweepCell> cells = {
        cell(0.05, RunOutcome::decayed), cell(0.10, RunOutcome::blew_up),
        cell(0.15, RunOutcome::decayed), cell(0.20, RunOutcome::blew_up)};
    CHECK(compute_k_fit(cells, above) == 0.05);
  }

  SECTION("all decayed reports above-grid") {
    std::vector<SweepCell> cells = {cell(0.05, RunOutcome::decayed),
                                    cell(0.10, RunOutcome::decayed)};
    CHECK(compute_k_fit(cells, above) == 0.10);
    CHECK(above);
  }
}

TEST_CASE("single-cell sweep reduces to run_decay") {
  const auto c = parse_config(base_json());
  const auto direct = run_decay(c);
  const auto sweep = stability_sweep(c, {c.n_per_side}, {c.dt}, 1);
  REQUIRE(sweep.cells.size() == 1);
  CHECK(sweep.cells[0].outcome == direct.outcome);
  CHECK(sweep.cells[0].steps == direct.steps);
  CHECK(sweep.cells[0].ratio ==
        Catch::Approx(c.dt * c.n_per_side * c.n_per_side));
}

TEST_CASE("sweep labels do not depend on the worker count") {
  auto j = base_json();
  j["scheme"]["name"] = "explicit";
  const auto c = parse_config(j);
  const std::vector<int> ns = {4, 5};
  const std::vector<double> dts = {0.004, 0.02};  // straddles the boundary
  const auto serial = stability_sweep(c, ns, dts, 1);
  const auto parallel = stability_sweep(c, ns, dts, 4);
  REQUIRE(serial.cells.size() == parallel.cells.size());
  for (std::size_t i = 0; i < serial.cells.size(); ++i) {
    CHECK(serial.cells[i].outcome == parallel.cells[i].outcome);
    CHECK(serial.cells[i].steps == parallel.cells[i].steps);
  }
  CHECK(serial.k_fit == parallel.k_fit);
  CHECK(serial.both_classes_present);
}

TEST_CASE("compare_schemes") {
  SECTION("zero steps gives an empty trace") {
    const auto c = parse_config(base_json());
    const auto r = compare_schemes(c, 0);
    CHECK(r.rows.empty());
    CHECK(r.max_rel_diff == 0.0);
  }

  SECTION("full-rank runs agree") {
    auto j = base_json();
    j["space"]["n_per_side"] = 7;  // no nodal aliasing of the initial modes
    j["dlr"]["R"] = 3;
    j["scheme"]["dt"] = 5.0;
    const auto c = parse_config(j);
    const auto r = compare_schemes(c, 8);
    REQUIRE(r.rows.size() == 8);
    CHECK(r.max_rel_diff < 1e-10);
    CHECK(r.monotone_alg1);
    CHECK(r.monotone_alg2);
  }
}

TEST_CASE("compare_projection_modes") {
  SECTION("rejected for non-semi-implicit schemes") {
    auto j = base_json();
    j["scheme"]["name"] = "explicit";
    const auto c = parse_config(j);
    CHECK_THROWS_AS(compare_projection_modes(c, {0.1}), ConfigError);
  }

  SECTION("tiny steps keep both modes monotone") {
    auto j = base_json();
    j["run"]["max_steps"] = 40;
    const auto c = parse_config(j);
    const auto runs = compare_projection_modes(c, {1e-4});
    REQUIRE(runs.size() == 2);
    for (const auto& r : runs) CHECK(r.monotone);
  }
}

TEST_CASE("checkpoint and resume through the snapshot format") {
  auto j = base_json();
  j["run"]["max_steps"] = 5;
  const auto c = parse_config(j);
  const auto first = run_decay(c);
  REQUIRE(first.outcome == RunOutcome::inconclusive);

  const auto path =
      (std::filesystem::temp_directory_path() / "dlr_ckpt.json").string();
  save_state(path, first.final_state, first.model->space, first.model->measure);
  auto loaded = load_state(path);
  std::filesystem::remove(path);

  const auto resumed = run_decay(c, loaded);
  CHECK(resumed.trace.rows.front().time ==
        Catch::Approx(first.trace.rows.back().time));
  CHECK(resumed.trace.rows.front().energy_norm ==
        Catch::Approx(first.trace.rows.back().energy_norm).epsilon(1e-12));
  // continues to dissipate from the checkpoint
  CHECK(resumed.trace.rows.back().energy_norm <
        first.trace.rows.back().energy_norm);
}
