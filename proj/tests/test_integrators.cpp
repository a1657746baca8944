#include <catch2/catch_amalgamated.hpp>

#include "dlr/experiments.hpp"
#include "dlr/integrators.hpp"
#include "test_helpers.hpp"

using namespace dlr;

namespace {

DlrState zero_state(const HeatModel& m, int r) {
  DlrState s;
  s.mean = Eigen::VectorXd::Zero(m.space.dof_count);
  s.modes_det = Eigen::MatrixXd::Zero(m.space.dof_count, r);
  Xoshiro256pp rng(1);
  s.modes_stoch = test::random_orthonormal_basis(m.measure, r, rng).columns;
  s.measure_id = m.measure.id;
  return s;
}

DlrState random_state(const HeatModel& m, int r, Xoshiro256pp& rng,
                      bool duplicate_column = false) {
  DlrState s;
  s.mean = test::random_vector(m.space.dof_count, rng);
  s.modes_det = test::random_matrix(m.space.dof_count, r, rng);
  if (duplicate_column && r >= 2) s.modes_det.col(r - 1) = s.modes_det.col(0);
  s.modes_stoch = test::random_orthonormal_basis(m.measure, r, rng).columns;
  s.measure_id = m.measure.id;
  return s;
}

}  // namespace

TEST_CASE("zero state is a fixed point of every scheme") {
  auto model =
      make_heat_model(4, gauss_legendre_measure(2, 3), make_cosine_diffusion(0.3, 2));
  for (Scheme sch :
       {Scheme::explicit_euler, Scheme::semi_implicit, Scheme::implicit_euler}) {
    SchemeConfig cfg;
    cfg.scheme = sch;
    cfg.dt = 0.5;
    const DlrStepper stepper(model, cfg);
    DlrState s = zero_state(model, 2);
    for (int it = 0; it < 3; ++it) {
      s = stepper.step(s).state;
      REQUIRE(s.mean.cwiseAbs().maxCoeff() < 1e-14);
      REQUIRE(s.modes_det.cwiseAbs().maxCoeff() < 1e-14);
    }
  }
}

TEST_CASE("deterministic problem reduces to backward Euler on the mean") {
  AffineDiffusion diff;
  diff.mean_field = [](double x, double y) {
    return 0.4 + 0.1 * std::sin(3.0 * x * y);
  };
  diff.terms.push_back([](double, double) { return 0.0; });
  auto model = make_heat_model(6, gauss_legendre_measure(1, 4), diff);
  SchemeConfig cfg;
  cfg.scheme = Scheme::semi_implicit;
  cfg.dt = 0.02;
  const DlrStepper stepper(model, cfg);

  DlrState s = zero_state(model, 3);
  s.mean = interpolate(model.space, [](double x, double y) {
    return std::sin(3.14159265358979323846 * x) * y * (1 - y);
  });

  // dense backward Euler oracle on the single field
  const Eigen::MatrixXd md(model.ops.mass), ad(model.ops.stiff_mean);
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(md + cfg.dt * ad);
  Eigen::VectorXd ref = s.mean;
  for (int it = 0; it < 20; ++it) {
    const auto res = stepper.step(s);
    s = res.state;
    ref = lu.solve(md * ref);
    const double scale = std::max(ref.cwiseAbs().maxCoeff(), 1e-300);
    REQUIRE((s.mean - ref).cwiseAbs().maxCoeff() < 1e-12 * scale);
    REQUIRE(s.modes_det.cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("explicit scheme dissipates under the CFL threshold") {
  auto model = make_heat_model(7, gauss_legendre_measure(2, 9),
                               make_cosine_diffusion(0.3, 2));
  SchemeConfig cfg;
  cfg.scheme = Scheme::explicit_euler;
  cfg.dt = 0.0017;  // dt/h^2 = 0.083, inside the stable region
  const DlrStepper stepper(model, cfg);
  DlrState s = kl_initialize(model.ops, model.measure,
                             initial_snapshots(model.space, model.measure), 3)
                   .state;
  StateNorms prev = state_norms(model.ops, model.measure, s);
  for (int it = 0; it < 150; ++it) {
    s = stepper.step(s).state;
    const StateNorms now = state_norms(model.ops, model.measure, s);
    REQUIRE(now.energy <= prev.energy * (1 + 1e-12));
    REQUIRE(now.h <= prev.h * (1 + 1e-12));
    prev = now;
  }
}

TEST_CASE("solve_stochastic_update") {
  Xoshiro256pp rng(55);
  const auto mu = gauss_legendre_measure(1, 6);

  SECTION("identity system with zero rhs returns Y unchanged") {
    const auto y = test::random_orthonormal_basis(mu, 3, rng);
    const auto r = solve_stochastic_update(
        Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Zero(3, mu.size()),
        y.columns, 1e-14);
    CHECK_FALSE(r.rank_deficient);
    CHECK((r.y_new - y.columns).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("kernel direction stays untouched") {
    Eigen::MatrixXd b(2, 2);
    b << 1, 0, 0, 0;
    Eigen::MatrixXd rhs(2, mu.size());
    rhs.row(0) = Eigen::RowVectorXd::Constant(mu.size(), 0.7);
    rhs.row(1).setZero();
    const auto y = test::random_orthonormal_basis(mu, 2, rng);
    const auto r = solve_stochastic_update(b, rhs, y.columns, 1e-14);
    CHECK(r.rank_deficient);
    CHECK(r.effective_rank == 1);
    const Eigen::MatrixXd delta = (r.y_new - y.columns).transpose();
    CHECK(delta.row(1).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((delta.row(0).array() - 0.7).abs().maxCoeff() < 1e-14);
    CHECK_FALSE(r.inconsistent);
  }

  SECTION("rank-deficient systems match the dense pseudoinverse") {
    for (int trial = 0; trial < 20; ++trial) {
      const int r = 3;
      Eigen::MatrixXd c = test::random_matrix(r, 2, rng);
      const Eigen::MatrixXd b = c * c.transpose();  // rank 2 of 3
      // rhs constructed inside the range of B
      const Eigen::MatrixXd rhs = b * test::random_matrix(r, mu.size(), rng);
      const auto y = test::random_orthonormal_basis(mu, r, rng);
      const auto res = solve_stochastic_update(b, rhs, y.columns, 1e-12);
      CHECK(res.rank_deficient);
      CHECK_FALSE(res.inconsistent);
      CHECK(res.kernel_residual < 1e-10);
      // dense minimal-norm least squares oracle
      const Eigen::MatrixXd pinv =
          b.completeOrthogonalDecomposition().pseudoInverse();
      const Eigen::MatrixXd expected = pinv * rhs;
      const Eigen::MatrixXd got = (res.y_new - y.columns).transpose();
      const double scale = std::max(expected.cwiseAbs().maxCoeff(), 1.0);
      REQUIRE((got - expected).cwiseAbs().maxCoeff() < 1e-10 * scale);
    }
  }

  SECTION("rhs outside the range is flagged") {
    Eigen::MatrixXd b(2, 2);
    b << 1, 0, 0, 0;
    Eigen::MatrixXd rhs(2, mu.size());
    rhs.setOnes();  // second row not reachable
    const auto y = test::random_orthonormal_basis(mu, 2, rng);
    const auto r = solve_stochastic_update(b, rhs, y.columns, 1e-14);
    CHECK(r.inconsistent);
  }
}

TEST_CASE("discretization properties hold after raw steps") {
  Xoshiro256pp rng(71);
  auto gl = gauss_legendre_measure(2, 4);
  auto mc = monte_carlo_measure(2, 14, 17);
  auto model_gl =
      make_heat_model(5, std::move(gl), make_cosine_diffusion(0.3, 2));
  auto model_mc =
      make_heat_model(5, std::move(mc), make_cosine_diffusion(0.3, 2));

  for (int trial = 0; trial < 24; ++trial) {
    const HeatModel& model = (trial % 2 == 0) ? model_gl : model_mc;
    const int r = 1 + static_cast<int>(rng.next() % 5);
    SchemeConfig cfg;
    cfg.scheme = (trial % 4 < 2) ? Scheme::explicit_euler : Scheme::semi_implicit;
    cfg.dt = std::pow(10.0, -3.0 + 4.0 * rng.uniform01());
    if (cfg.scheme == Scheme::explicit_euler) cfg.dt = std::min(cfg.dt, 1e-3);
    const bool degenerate = trial % 3 == 0;
    cfg.rank_tol_factor = degenerate ? 1e-6 : 1e-14;
    const DlrState s = random_state(model, r, rng, degenerate);
    const DlrStepper stepper(model, cfg);
    const auto res = stepper.step(s);

    const double y_scale =
        std::max(1.0, res.diag.y_tilde.cwiseAbs().maxCoeff());
    const auto d = do_residual(model.measure, s.stochastic_basis(),
                               res.diag.y_tilde);
    REQUIRE(d.do_condition < 1e-10 * y_scale);
    REQUIRE(d.mean_defect < 1e-10 * y_scale);
    REQUIRE(d.gram_identity < 1e-10 * y_scale);

    const auto vr =
        variational_residual(model.measure, model.ops, s, res.state,
                             res.diag.u_tilde, cfg.scheme, cfg.dt);
    REQUIRE(vr.max_abs < 1e-9 * vr.scale);
  }
}

TEST_CASE("exactly rank-deficient step satisfies the variational formulation") {
  // Forcing built so that the deterministic modes stay put while the
  // stochastic equation has a nontrivial consistent right-hand side over a
  // singular gram matrix.
  Xoshiro256pp rng(83);
  auto model =
      make_heat_model(4, gauss_legendre_measure(2, 3), make_cosine_diffusion(0.3, 2));
  const int r = 3;
  DlrState s = random_state(model, r, rng, true);  // duplicated U column

  const int n = model.measure.size();
  const Eigen::MatrixXd u_all = evaluate_all(s, n);
  Eigen::VectorXd c = test::random_vector(n, rng);
  c.array() -= model.measure.weights.dot(c);
  c -= s.modes_stoch * (s.modes_stoch.transpose() *
                        (model.measure.weights.asDiagonal() * c));
  const Eigen::VectorXd g = test::random_vector(model.space.dof_count, rng);
  Eigen::MatrixXd loads(model.space.dof_count, n);
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd lk = Eigen::VectorXd::Zero(model.space.dof_count);
    apply_stiffness_at(model.ops, model.measure, k, u_all.col(k), lk);
    loads.col(k) = lk + c[k] * g;
  }
  model.forcing = [loads](double, int k) { return loads.col(k); };

  SchemeConfig cfg;
  cfg.scheme = Scheme::explicit_euler;
  cfg.dt = 0.3;
  const DlrStepper stepper(model, cfg);
  const auto res = stepper.step(s);

  CHECK(res.diag.rank_deficient_path);
  CHECK(res.diag.kernel_residual < 1e-10);
  CHECK_FALSE(res.diag.inconsistent_update);
  // deterministic modes unchanged by construction
  CHECK((res.diag.u_tilde - s.modes_det).cwiseAbs().maxCoeff() <
        1e-11 * s.modes_det.cwiseAbs().maxCoeff());
  // raw stochastic update moved
  CHECK((res.diag.y_tilde - s.modes_stoch).cwiseAbs().maxCoeff() > 1e-6);

  const auto d =
      do_residual(model.measure, s.stochastic_basis(), res.diag.y_tilde);
  CHECK(d.max() < 1e-10 * std::max(1.0, res.diag.y_tilde.cwiseAbs().maxCoeff()));
  const auto vr = variational_residual(model.measure, model.ops, s, res.state,
                                       res.diag.u_tilde, cfg.scheme, cfg.dt,
                                       model.forcing);
  CHECK(vr.max_abs < 1e-9 * vr.scale);
}

TEST_CASE("implicit scheme: Picard converges and dissipates") {
  auto model =
      make_heat_model(4, gauss_legendre_measure(2, 3), make_cosine_diffusion(0.3, 2));
  SchemeConfig cfg;
  cfg.scheme = Scheme::implicit_euler;
  cfg.dt = 1.0;
  const DlrStepper stepper(model, cfg);
  DlrState s = kl_initialize(model.ops, model.measure,
                             initial_snapshots(model.space, model.measure), 2)
                   .state;
  StateNorms prev = state_norms(model.ops, model.measure, s);
  for (int it = 0; it < 10; ++it) {
    const auto res = stepper.step(s);
    s = res.state;
    CHECK(res.diag.fp_iterations > 0);
    if (res.diag.fp_converged) {
      const StateNorms now = state_norms(model.ops, model.measure, s);
      CHECK(now.energy <= prev.energy * (1 + 1e-12));
      CHECK(now.h <= prev.h * (1 + 1e-12));
      prev = now;
    }
  }
}

TEST_CASE("projector splitting") {
  SECTION("zero state stays zero") {
    auto model = make_heat_model(4, gauss_legendre_measure(2, 3),
                                 make_cosine_diffusion(0.3, 2));
    SchemeConfig cfg;
    cfg.scheme = Scheme::semi_implicit;
    cfg.dt = 2.0;
    const SplittingStepper stepper(model, cfg);
    DdoState d = to_ddo(model.ops, zero_state(model, 2));
    for (int it = 0; it < 3; ++it) {
      d = stepper.step(d);
      REQUIRE(d.mean.cwiseAbs().maxCoeff() < 1e-14);
      REQUIRE(d.core.cwiseAbs().maxCoeff() < 1e-14);
    }
  }

  SECTION("full-rank reconstructions coincide with the staggered scheme") {
    auto model = make_heat_model(5, monte_carlo_measure(3, 15, 77),
                                 make_cosine_diffusion(0.3, 3));
    SchemeConfig cfg;
    cfg.scheme = Scheme::semi_implicit;
    cfg.dt = 50.0;
    const DlrStepper alg1(model, cfg);
    const SplittingStepper alg2(model, cfg);
    DlrState s1 = kl_initialize(model.ops, model.measure,
                                initial_snapshots(model.space, model.measure), 3)
                      .state;
    DdoState s2 = to_ddo(model.ops, s1);
    for (int it = 0; it < 10; ++it) {
      s1 = alg1.step(s1).state;
      s2 = alg2.step(s2);
      const Eigen::MatrixXd r1 = evaluate_all(s1, model.measure.size());
      const Eigen::MatrixXd r2 =
          evaluate_all(from_ddo(s2), model.measure.size());
      const double denom = std::max(r1.cwiseAbs().maxCoeff(), 1e-300);
      REQUIRE((r1 - r2).cwiseAbs().maxCoeff() / denom < 1e-10);
    }
  }

  SECTION("implicit operator evaluation is rejected") {
    auto model = make_heat_model(4, gauss_legendre_measure(2, 3),
                                 make_cosine_diffusion(0.3, 2));
    SchemeConfig cfg;
    cfg.scheme = Scheme::implicit_euler;
    cfg.dt = 1.0;
    CHECK_THROWS_AS(SplittingStepper(model, cfg), std::invalid_argument);
  }
}

TEST_CASE("full tensor reference stepper") {
  SECTION("backward Euler is dissipative in H") {
    auto model = make_heat_model(4, gauss_legendre_measure(2, 2),
                                 make_cosine_diffusion(0.3, 2));
    Xoshiro256pp rng(91);
    FullTensorState s;
    s.snapshots =
        test::random_matrix(model.space.dof_count, model.measure.size(), rng);
    double prev = norm_H(model.ops, model.measure, s.snapshots);
    for (int it = 0; it < 5; ++it) {
      s = full_tensor_step(s, model, 0.7);
      const double now = norm_H(model.ops, model.measure, s.snapshots);
      REQUIRE(now <= prev * (1 + 1e-12));
      prev = now;
    }
  }

  SECTION("deterministic problems keep all samples identical") {
    AffineDiffusion diff;
    diff.mean_field = [](double, double) { return 0.5; };
    diff.terms.push_back([](double, double) { return 0.0; });
    auto model = make_heat_model(4, gauss_legendre_measure(1, 3), diff);
    FullTensorState s;
    const Eigen::VectorXd u0 = interpolate(model.space, [](double x, double y) {
      return x * (1 - x) * y * (1 - y);
    });
    s.snapshots = u0.replicate(1, model.measure.size());
    for (int it = 0; it < 4; ++it) {
      s = full_tensor_step(s, model, 0.1);
      for (int k = 1; k < model.measure.size(); ++k)
        REQUIRE((s.snapshots.col(k) - s.snapshots.col(0)).cwiseAbs().maxCoeff() <
                1e-14);
    }
  }

  SECTION("DLR tracks the full tensor solution as R grows") {
    auto model = make_heat_model(7, gauss_legendre_measure(2, 3),
                                 make_cosine_diffusion(0.3, 2));
    const auto snaps = initial_snapshots(model.space, model.measure);
    SchemeConfig cfg;
    cfg.scheme = Scheme::semi_implicit;
    cfg.dt = 0.02;
    const DlrStepper stepper(model, cfg);
    const int steps = 25;
    FullTensorState full{snaps, 0.0};
    for (int it = 0; it < steps; ++it)
      full = full_tensor_step(full, model, cfg.dt);

    double prev_err = std::numeric_limits<double>::infinity();
    for (int r : {1, 2, 4}) {
      DlrState s = kl_initialize(model.ops, model.measure, snaps, r).state;
      for (int it = 0; it < steps; ++it) s = stepper.step(s).state;
      const double err = norm_H(
          model.ops, model.measure,
          evaluate_all(s, model.measure.size()) - full.snapshots);
      REQUIRE(err <= prev_err * (1 + 1e-9));
      prev_err = err;
    }
    const double full_norm = norm_H(model.ops, model.measure, full.snapshots);
    CHECK(prev_err <= 0.5 * std::max(full_norm, 1e-300));
  }
}
