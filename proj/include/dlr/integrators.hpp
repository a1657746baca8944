#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "dlr/fem.hpp"
#include "dlr/measure.hpp"
#include "dlr/state.hpp"

namespace dlr {

struct FixedPointConfig {
  int max_iters = 100;
  double tol = 1e-12;  // absolute, in the H x L2 norm of the reconstruction
};

struct SchemeConfig {
  Scheme scheme = Scheme::semi_implicit;
  double dt = 0.0;
  ForcingRule forcing_rule = ForcingRule::left;
  ProjectionMode projection_mode = ProjectionMode::gauss_seidel;
  double rank_tol_factor = std::numeric_limits<double>::epsilon();
  FixedPointConfig implicit_fp;
  std::uint64_t completion_seed = 0x5eedULL;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("SchemeConfig: dt must be > 0");
    if (!(rank_tol_factor > 0.0) || rank_tol_factor > 1e-6)
      throw std::invalid_argument(
          "SchemeConfig: rank_tol_factor must be in (0, 1e-6]");
    if (implicit_fp.max_iters < 1 || !(implicit_fp.tol > 0.0))
      throw std::invalid_argument("SchemeConfig: invalid implicit_fp");
  }
};

struct HeatModel {
  FeSpace space;
  DiscreteMeasure measure;
  AffineDiffusion diffusion;
  OperatorMatrices ops;
  Forcing forcing;  // empty = zero right-hand side
};

inline HeatModel make_heat_model(int n_per_side, DiscreteMeasure mu,
                                 AffineDiffusion diff, Forcing forcing = {}) {
  if (static_cast<int>(diff.terms.size()) > mu.dim())
    throw std::invalid_argument(
        "make_heat_model: more diffusion terms than measure dimensions");
  HeatModel m;
  m.space = build_space(n_per_side);
  m.measure = std::move(mu);
  m.diffusion = std::move(diff);
  m.ops = assemble(m.space, m.diffusion);
  m.forcing = std::move(forcing);
  return m;
}

struct StochasticUpdateResult {
  Eigen::MatrixXd y_new;  // N x R
  bool rank_deficient = false;
  bool inconsistent = false;
  int effective_rank = 0;
  double min_eig = 0.0, max_eig = 0.0;
  double kernel_residual = 0.0;      // increment component in ker(B)
  double consistency_residual = 0.0; // ||B d - rhs|| relative
};

// Solve B (Ytilde - Yn)' = rhs per sample, B symmetric PSD shared across
// samples. Full-rank path: one Cholesky. Rank-deficient path (smallest
// eigenvalue under rank_tol_factor * sigma_1 * R): eigen pseudoinverse, which
// gives the minimal-norm per-sample increment supported on ker(B)-perp.
inline StochasticUpdateResult solve_stochastic_update(
    const Eigen::MatrixXd& b, const Eigen::MatrixXd& rhs,
    const Eigen::MatrixXd& y_n, double rank_tol_factor) {
  const int r = static_cast<int>(b.rows());
  if (b.cols() != r || rhs.rows() != r || y_n.cols() != r)
    throw std::invalid_argument("solve_stochastic_update: shape mismatch");
  StochasticUpdateResult out;
  if (r == 0) {
    out.y_new = y_n;
    return out;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("solve_stochastic_update: eigensolve failed");
  const Eigen::VectorXd ev = es.eigenvalues();
  out.min_eig = ev(0);
  out.max_eig = ev(r - 1);
  const double thresh = rank_tol_factor * std::max(out.max_eig, 0.0) * r;

  Eigen::MatrixXd delta(r, rhs.cols());
  if (out.min_eig > thresh) {
    out.effective_rank = r;
    delta = b.llt().solve(rhs);
  } else {
    out.rank_deficient = true;
    Eigen::VectorXd inv(r);
    for (int i = 0; i < r; ++i) {
      if (ev(i) > thresh) {
        inv(i) = 1.0 / ev(i);
        ++out.effective_rank;
      } else {
        inv(i) = 0.0;
      }
    }
    delta = es.eigenvectors() *
            (inv.asDiagonal() * (es.eigenvectors().transpose() * rhs));
    // increment must stay orthogonal to the kernel
    double kres = 0.0;
    const double dmax = std::max(delta.cwiseAbs().maxCoeff(), 1.0);
    for (int i = 0; i < r; ++i)
      if (!(ev(i) > thresh))
        kres = std::max(
            kres,
            (es.eigenvectors().col(i).transpose() * delta).cwiseAbs().maxCoeff());
    out.kernel_residual = kres / dmax;
  }
  const double scale =
      std::max({rhs.cwiseAbs().maxCoeff(),
                std::max(out.max_eig, 0.0) * delta.cwiseAbs().maxCoeff(), 1e-300});
  out.consistency_residual = (b * delta - rhs).cwiseAbs().maxCoeff() / scale;
  if (out.consistency_residual > 1e-8) out.inconsistent = true;
  out.y_new = y_n + delta.transpose();
  return out;
}

struct StepDiagnostics {
  Eigen::MatrixXd u_tilde;  // deterministic basis before reorthonormalization
  Eigen::MatrixXd y_tilde;  // raw stochastic update
  bool rank_deficient_path = false;
  bool inconsistent_update = false;
  bool basis_completed = false;
  double kernel_residual = 0.0;
  double gram_min_eig = 0.0, gram_max_eig = 0.0;  // of M_tilde
  int effective_rank = 0;
  int fp_iterations = 0;
  bool fp_converged = true;
  std::vector<double> fp_history;
  bool finite = true;
};

struct StepResult {
  DlrState state;
  StepDiagnostics diag;
};

// One-step map of the staggered scheme: mean, then deterministic modes, then
// the stochastic update projected off span(Y^n), then reorthonormalization.
// A stepper instance owns the factorizations for its dt, which are computed
// once and reused across steps.
class DlrStepper {
 public:
  DlrStepper(const HeatModel& model, const SchemeConfig& cfg)
      : model_(&model), cfg_(cfg) {
    cfg_.validate();
    mass_llt_.compute(model.ops.mass);
    if (mass_llt_.info() != Eigen::Success)
      throw std::runtime_error("DlrStepper: mass factorization failed");
    if (cfg_.scheme != Scheme::explicit_euler) {
      SparseMat sys = model.ops.mass + cfg_.dt * model.ops.stiff_mean;
      sys_llt_.compute(sys);
      if (sys_llt_.info() != Eigen::Success)
        throw std::runtime_error("DlrStepper: system factorization failed");
    }
  }

  const SchemeConfig& config() const { return cfg_; }

  StepResult step(const DlrState& state) const {
    check_state(state);
    switch (cfg_.scheme) {
      case Scheme::explicit_euler:
        return explicit_step(state);
      case Scheme::semi_implicit: {
        const Eigen::MatrixXd un = evaluate_all(state, model_->measure.size());
        auto [raw, diag] = core_step(state, un, forcing_time(state), false);
        return finalize(state, std::move(raw), std::move(diag));
      }
      case Scheme::implicit_euler:
        return implicit_step(state);
    }
    throw std::logic_error("unreachable");
  }

 private:
  struct RawStep {
    Eigen::VectorXd mean;
    Eigen::MatrixXd u_tilde;
    Eigen::MatrixXd y_tilde;
  };

  void check_state(const DlrState& state) const {
    if (state.measure_id != model_->measure.id)
      throw std::invalid_argument("step: state belongs to another measure");
    if (state.rank() >= model_->measure.size())
      throw std::invalid_argument(
          "step: DLR rank must be smaller than the number of sample points");
  }

  double forcing_time(const DlrState& state) const {
    if (cfg_.scheme == Scheme::implicit_euler) return state.time + cfg_.dt;
    if (cfg_.scheme == Scheme::semi_implicit &&
        cfg_.forcing_rule == ForcingRule::right)
      return state.time + cfg_.dt;
    return state.time;
  }

  Eigen::MatrixXd load_matrix(double t) const {
    const int n = model_->measure.size();
    const int nd = model_->space.dof_count;
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(nd, n);
    if (model_->forcing)
      for (int k = 0; k < n; ++k) f.col(k) = model_->forcing(t, k);
    return f;
  }

  // W.col(k) = sum_m omega_{k,m} A_m * src.col(k)  (stochastic part only)
  Eigen::MatrixXd stoch_apply(const Eigen::MatrixXd& src) const {
    const auto& mu = model_->measure;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(src.rows(), src.cols());
    for (std::size_t m = 0; m < model_->ops.stiff_terms.size(); ++m) {
      const Eigen::MatrixXd t = model_->ops.stiff_terms[m] * src;
      w.noalias() += t * mu.points.col(static_cast<int>(m)).asDiagonal();
    }
    return w;
  }

  std::uint64_t step_seed(const DlrState& state) const {
    return cfg_.completion_seed ^ std::bit_cast<std::uint64_t>(state.time);
  }

  StepResult finalize(const DlrState& state, RawStep raw,
                      StepDiagnostics diag) const {
    const auto& mu = model_->measure;
    auto reorth = reorthonormalize(mu, raw.mean, raw.u_tilde, raw.y_tilde,
                                   state.time + cfg_.dt, step_seed(state));
    diag.u_tilde = std::move(raw.u_tilde);
    diag.y_tilde = std::move(raw.y_tilde);
    diag.basis_completed = reorth.completed_basis;
    diag.finite = reorth.state.mean.allFinite() &&
                  reorth.state.modes_det.allFinite() &&
                  reorth.state.modes_stoch.allFinite();
    return {std::move(reorth.state), std::move(diag)};
  }

  // Shared core for the semi-implicit scheme and the Picard iterates of the
  // implicit scheme: L_det is treated implicitly, L_stoch is applied to
  // `stoch_src` (u^n for semi-implicit, the previous iterate for implicit).
  std::pair<RawStep, StepDiagnostics> core_step(
      const DlrState& state, const Eigen::MatrixXd& stoch_src, double t_f,
      bool skip_diag) const {
    const auto& mu = model_->measure;
    const auto& ops = model_->ops;
    const int r = state.rank();
    const double dt = cfg_.dt;

    Eigen::MatrixXd w = stoch_apply(stoch_src);
    if (model_->forcing) w -= load_matrix(t_f);

    RawStep raw;
    raw.mean = sys_llt_.solve(
        (ops.mass * state.mean - dt * (w * mu.weights)).eval());
    raw.u_tilde.resize(state.modes_det.rows(), r);
    for (int j = 0; j < r; ++j) {
      const Eigen::VectorXd rhs =
          ops.mass * state.modes_det.col(j) -
          dt * (w * (mu.weights.cwiseProduct(state.modes_stoch.col(j))));
      raw.u_tilde.col(j) = sys_llt_.solve(rhs);
    }

    const Eigen::MatrixXd& uproj =
        cfg_.projection_mode == ProjectionMode::gauss_seidel ? raw.u_tilde
                                                             : state.modes_det;
    StepDiagnostics diag;
    if (r > 0) {
      const Eigen::MatrixXd m_tilde = gram(ops.mass, uproj);
      const Eigen::MatrixXd b =
          m_tilde + dt * (uproj.transpose() * (ops.stiff_mean * uproj));
      Eigen::MatrixXd g = w.transpose() * uproj;  // N x R
      g = center_columns(mu, g);
      g = project_off_columns(mu, state.modes_stoch, g);
      const auto upd = solve_stochastic_update(
          b, (-dt * g.transpose()).eval(), state.modes_stoch,
          cfg_.rank_tol_factor);
      raw.y_tilde = upd.y_new;
      if (!skip_diag) {
        diag.rank_deficient_path = upd.rank_deficient;
        diag.inconsistent_update = upd.inconsistent;
        diag.kernel_residual = upd.kernel_residual;
        diag.effective_rank = upd.effective_rank;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m_tilde,
                                                          Eigen::EigenvaluesOnly);
        diag.gram_min_eig = es.eigenvalues()(0);
        diag.gram_max_eig = es.eigenvalues()(r - 1);
      }
    } else {
      raw.y_tilde.resize(mu.size(), 0);
    }
    return {std::move(raw), std::move(diag)};
  }

  StepResult explicit_step(const DlrState& state) const {
    const auto& mu = model_->measure;
    const auto& ops = model_->ops;
    const int r = state.rank();
    const double dt = cfg_.dt;
    const Eigen::MatrixXd un = evaluate_all(state, mu.size());

    Eigen::MatrixXd w = stoch_apply(un);
    w.noalias() += ops.stiff_mean * un;
    if (model_->forcing) w -= load_matrix(state.time);

    RawStep raw;
    raw.mean =
        mass_llt_.solve((ops.mass * state.mean - dt * (w * mu.weights)).eval());
    raw.u_tilde.resize(state.modes_det.rows(), r);
    for (int j = 0; j < r; ++j) {
      const Eigen::VectorXd rhs =
          ops.mass * state.modes_det.col(j) -
          dt * (w * (mu.weights.cwiseProduct(state.modes_stoch.col(j))));
      raw.u_tilde.col(j) = mass_llt_.solve(rhs);
    }

    const Eigen::MatrixXd& uproj =
        cfg_.projection_mode == ProjectionMode::gauss_seidel ? raw.u_tilde
                                                             : state.modes_det;
    StepDiagnostics diag;
    if (r > 0) {
      const Eigen::MatrixXd b = gram(ops.mass, uproj);
      Eigen::MatrixXd g = w.transpose() * uproj;
      g = center_columns(mu, g);
      g = project_off_columns(mu, state.modes_stoch, g);
      const auto upd = solve_stochastic_update(
          b, (-dt * g.transpose()).eval(), state.modes_stoch,
          cfg_.rank_tol_factor);
      raw.y_tilde = upd.y_new;
      diag.rank_deficient_path = upd.rank_deficient;
      diag.inconsistent_update = upd.inconsistent;
      diag.kernel_residual = upd.kernel_residual;
      diag.effective_rank = upd.effective_rank;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b, Eigen::EigenvaluesOnly);
      diag.gram_min_eig = es.eigenvalues()(0);
      diag.gram_max_eig = es.eigenvalues()(r - 1);
    } else {
      raw.y_tilde.resize(mu.size(), 0);
    }
    return finalize(state, std::move(raw), std::move(diag));
  }

  // Implicit scheme via Picard iteration around the semi-implicit step:
  // L_stoch is frozen at the previous iterate's reconstruction, so the fixed
  // point satisfies the fully implicit operator evaluation. Iterate 1 is the
  // plain semi-implicit step.
  StepResult implicit_step(const DlrState& state) const {
    const auto& mu = model_->measure;
    const int n = mu.size();
    const double t_f = state.time + cfg_.dt;

    Eigen::MatrixXd src = evaluate_all(state, n);
    RawStep raw;
    StepDiagnostics diag;
    Eigen::MatrixXd prev_recon;
    bool converged = false;
    std::vector<double> history;
    int iters = 0;
    for (int it = 1; it <= cfg_.implicit_fp.max_iters; ++it) {
      auto [r_it, d_it] = core_step(state, src, t_f, it == 1 ? false : true);
      Eigen::MatrixXd recon = r_it.mean.replicate(1, n);
      if (state.rank() > 0)
        recon.noalias() += r_it.u_tilde * r_it.y_tilde.transpose();
      iters = it;
      if (it == 1) diag = std::move(d_it);
      raw = std::move(r_it);
      if (it > 1) {
        const double dn = norm_H(model_->ops, mu, recon - prev_recon);
        history.push_back(dn);
        if (dn <= cfg_.implicit_fp.tol) {
          converged = true;
          prev_recon = std::move(recon);
          break;
        }
      }
      prev_recon = std::move(recon);
      src = prev_recon;
    }
    auto result = finalize(state, std::move(raw), std::move(diag));
    result.diag.fp_iterations = iters;
    result.diag.fp_converged = converged;
    result.diag.fp_history = std::move(history);
    return result;
  }

  const HeatModel* model_;
  SchemeConfig cfg_;
  Eigen::SimplicialLLT<SparseMat> mass_llt_;
  Eigen::SimplicialLLT<SparseMat> sys_llt_;
};

// Convenience one-shot step (refactorizes every call).
inline StepResult step(const DlrState& state, const HeatModel& model,
                       const SchemeConfig& cfg) {
  return DlrStepper(model, cfg).step(state);
}

// Projector-splitting sweep (K, S, L) on the bi-orthogonal form, with the
// operator evaluation rule of cfg.scheme (explicit or semi-implicit).
// Orthonormalization is by weighted pivoted QR with completion of rank-
// deficient factors.
class SplittingStepper {
 public:
  SplittingStepper(const HeatModel& model, const SchemeConfig& cfg)
      : model_(&model), cfg_(cfg) {
    cfg_.validate();
    if (cfg_.scheme == Scheme::implicit_euler)
      throw std::invalid_argument(
          "SplittingStepper: only explicit and semi-implicit operator "
          "evaluations are supported");
    mass_llt_.compute(model.ops.mass);
    if (mass_llt_.info() != Eigen::Success)
      throw std::runtime_error("SplittingStepper: mass factorization failed");
    if (cfg_.scheme == Scheme::semi_implicit) {
      SparseMat sys = model.ops.mass + cfg_.dt * model.ops.stiff_mean;
      sys_llt_.compute(sys);
      if (sys_llt_.info() != Eigen::Success)
        throw std::runtime_error("SplittingStepper: system factorization failed");
    }
  }

  DdoState step(const DdoState& d) const {
    const auto& mu = model_->measure;
    const auto& ops = model_->ops;
    const int n = mu.size();
    const int r = d.rank();
    const double dt = cfg_.dt;
    const bool semi = cfg_.scheme == Scheme::semi_implicit;
    if (d.measure_id != mu.id)
      throw std::invalid_argument("step: state belongs to another measure");

    Eigen::MatrixXd usamp = d.mean.replicate(1, n);
    const Eigen::MatrixXd us = d.modes_det * d.core;
    if (r > 0) usamp.noalias() += us * d.modes_stoch.transpose();

    // w.col(k) = f_k - L_k u_k (explicit) or f_k - L_stoch,k u_k (semi)
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(usamp.rows(), n);
    for (std::size_t m = 0; m < ops.stiff_terms.size(); ++m) {
      const Eigen::MatrixXd t = ops.stiff_terms[m] * usamp;
      w.noalias() -= t * mu.points.col(static_cast<int>(m)).asDiagonal();
    }
    if (!semi) w.noalias() -= ops.stiff_mean * usamp;
    const double t_f = (semi && cfg_.forcing_rule == ForcingRule::right)
                           ? d.time + dt
                           : d.time;
    if (model_->forcing)
      for (int k = 0; k < n; ++k) w.col(k) += model_->forcing(t_f, k);
    // zero-mean part across samples
    const Eigen::MatrixXd wc = w.colwise() - (w * mu.weights).eval();

    auto solve_sys = [&](const Eigen::VectorXd& rhs) {
      return semi ? sys_llt_.solve(rhs).eval() : mass_llt_.solve(rhs).eval();
    };

    DdoState out;
    out.time = d.time + dt;
    out.measure_id = d.measure_id;
    out.mean = solve_sys(ops.mass * d.mean + dt * (w * mu.weights));
    if (r == 0) {
      out.modes_det = d.modes_det;
      out.core = d.core;
      out.modes_stoch = d.modes_stoch;
      return out;
    }

    // K step
    Eigen::MatrixXd k1(usamp.rows(), r);
    const Eigen::MatrixXd wlv =
        wc * (mu.weights.asDiagonal() * d.modes_stoch);  // nd x R
    for (int j = 0; j < r; ++j)
      k1.col(j) = solve_sys(ops.mass * us.col(j) + dt * wlv.col(j));

    // QR of K1 in the H inner product
    Xoshiro256pp rng(cfg_.completion_seed ^
                     std::bit_cast<std::uint64_t>(d.time));
    Eigen::MatrixXd u1 = k1, s1_hat;
    {
      auto apply_w = [&ops](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        return ops.mass * x;
      };
      auto draw = [&]() {
        Eigen::VectorXd v(u1.rows());
        for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
        return v;
      };
      detail::weighted_pivoted_qr(u1, s1_hat, apply_w, draw, 1e-14);
    }

    // S step (backward): explicit formula; implicit L_det contribution shows
    // up as the (I + dt D) factor, which cancels the unknown through the
    // discrete DO identity.
    const Eigen::MatrixXd u1w = u1.transpose() * wlv;  // R x R
    Eigen::MatrixXd s0_tilde;
    Eigen::MatrixXd dmat;
    if (semi) {
      dmat = u1.transpose() * (ops.stiff_mean * u1);
      s0_tilde = (Eigen::MatrixXd::Identity(r, r) + dt * dmat) * s1_hat -
                 dt * u1w;
    } else {
      s0_tilde = s1_hat - dt * u1w;
    }

    // L step
    const Eigen::MatrixXd z = wc.transpose() * u1;  // n x R
    Eigen::MatrixXd l1;
    if (semi) {
      const Eigen::MatrixXd sys =
          Eigen::MatrixXd::Identity(r, r) + dt * dmat;
      const Eigen::MatrixXd rhs =
          s0_tilde * d.modes_stoch.transpose() + dt * z.transpose();  // R x n
      l1 = sys.llt().solve(rhs).transpose();
    } else {
      l1 = d.modes_stoch * s0_tilde.transpose() + dt * z;
    }

    // QR of L1 in the weighted L2 inner product, zero-mean completion
    Eigen::MatrixXd v1 = l1, t1;
    {
      auto apply_w = [&mu](const Eigen::VectorXd& x) -> Eigen::VectorXd {
        return mu.weights.asDiagonal() * x;
      };
      auto draw = [&]() {
        Eigen::VectorXd v(mu.size());
        for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
        v.array() -= mu.weights.dot(v);
        return v;
      };
      detail::weighted_pivoted_qr(v1, t1, apply_w, draw, 1e-14);
    }
    out.modes_det = u1;
    out.core = t1.transpose();
    out.modes_stoch = v1;
    return out;
  }

 private:
  const HeatModel* model_;
  SchemeConfig cfg_;
  Eigen::SimplicialLLT<SparseMat> mass_llt_;
  Eigen::SimplicialLLT<SparseMat> sys_llt_;
};

struct FullTensorState {
  Eigen::MatrixXd snapshots;  // dof x N
  double time = 0.0;
};

// Reference theta-scheme on the full tensor problem, solved sample by sample.
inline FullTensorState full_tensor_step(const FullTensorState& s,
                                        const HeatModel& model, double dt,
                                        double theta = 1.0) {
  if (!(dt > 0.0)) throw std::invalid_argument("full_tensor_step: dt must be > 0");
  const auto& mu = model.measure;
  FullTensorState out;
  out.time = s.time + dt;
  out.snapshots.resize(s.snapshots.rows(), s.snapshots.cols());
  for (int k = 0; k < mu.size(); ++k) {
    const SparseMat a_k = stiffness_at(model.ops, mu, k);
    SparseMat lhs = model.ops.mass + theta * dt * a_k;
    Eigen::VectorXd rhs = model.ops.mass * s.snapshots.col(k) -
                          (1.0 - theta) * dt * (a_k * s.snapshots.col(k));
    if (model.forcing)
      rhs += dt * ((1.0 - theta) * model.forcing(s.time, k) +
                   theta * model.forcing(s.time + dt, k));
    Eigen::SimplicialLLT<SparseMat> llt(lhs);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("full_tensor_step: factorization failed");
    out.snapshots.col(k) = llt.solve(rhs);
  }
  return out;
}

}  // namespace dlr
