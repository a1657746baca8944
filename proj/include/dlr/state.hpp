#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlr/fem.hpp"
#include "dlr/measure.hpp"
#include "dlr/rng.hpp"

namespace dlr {

enum class Scheme { explicit_euler, semi_implicit, implicit_euler };
enum class ProjectionMode { gauss_seidel, fully_explicit };
enum class ForcingRule { left, right };

// Load vector of the forcing term at (t, sample k); an empty function means
// f == 0.
using Forcing = std::function<Eigen::VectorXd(double, int)>;

// u = mean + sum_j modes_det[:,j] * modes_stoch[:,j], with the stochastic
// modes orthonormal and zero-mean under the owning measure. Deterministic
// modes need not be independent: rank-deficient states are legal.
struct DlrState {
  Eigen::VectorXd mean;         // dof_count
  Eigen::MatrixXd modes_det;    // dof_count x R
  Eigen::MatrixXd modes_stoch;  // N x R
  double time = 0.0;
  std::uint64_t measure_id = 0;

  int rank() const { return static_cast<int>(modes_det.cols()); }

  StochasticBasis stochastic_basis() const {
    return StochasticBasis{modes_stoch, measure_id};
  }
};

// Bi-orthogonal form u = mean + U S V^T with U orthonormal in H and V
// orthonormal in L2 of the measure.
struct DdoState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd modes_det;   // H-orthonormal columns
  Eigen::MatrixXd core;        // R x R
  Eigen::MatrixXd modes_stoch;
  double time = 0.0;
  std::uint64_t measure_id = 0;

  int rank() const { return static_cast<int>(core.cols()); }
};

inline Eigen::MatrixXd gram(const SparseMat& mass, const Eigen::MatrixXd& u) {
  return u.transpose() * (mass * u);
}

inline FeFunction evaluate(const DlrState& s, int k) {
  if (k < 0 || k >= s.modes_stoch.rows())
    throw std::out_of_range("evaluate: sample index out of range");
  FeFunction f;
  if (s.rank() == 0)
    f.coeffs = s.mean;
  else
    f.coeffs = s.mean + s.modes_det * s.modes_stoch.row(k).transpose();
  return f;
}

inline Eigen::MatrixXd evaluate_all(const DlrState& s, int n_samples) {
  Eigen::MatrixXd out = s.mean.replicate(1, n_samples);
  if (s.rank() > 0) out.noalias() += s.modes_det * s.modes_stoch.transpose();
  return out;
}

struct StateNorms {
  double h = 0, v = 0, energy = 0;
};

inline StateNorms state_norms(const OperatorMatrices& ops,
                              const DiscreteMeasure& mu, const DlrState& s) {
  const Eigen::MatrixXd snap = evaluate_all(s, mu.size());
  return {norm_H(ops, mu, snap), norm_V(ops, mu, snap),
          norm_energy(ops, mu, snap)};
}

namespace detail {

// Weighted QR with optional column pivoting: factor A = Q T with Q
// orthonormal in the inner product <x,y> = x' W y given by apply_w. Columns
// whose orthogonalized remainder falls below drop_tol (relative to the
// largest initial column norm) are replaced by completions drawn from `draw`;
// the corresponding rows of T are zeroed. T is recomputed as Q' W A at the
// end, which keeps the reconstruction Q T as close to A as the achieved
// orthonormality allows. Returns true if any column was completed.
template <class ApplyW, class Draw>
inline bool weighted_qr(Eigen::MatrixXd& a, Eigen::MatrixXd& t_out,
                        ApplyW&& apply_w, Draw&& draw, double rel_drop_tol,
                        bool pivot) {
  const int r = static_cast<int>(a.cols());
  const Eigen::MatrixXd a0 = a;
  Eigen::MatrixXd wk = a;
  Eigen::MatrixXd q(a.rows(), r);
  std::vector<bool> used(r, false);
  std::vector<bool> is_completed(r, false);
  Eigen::VectorXd norms(r);
  double max_norm = 0.0;
  for (int j = 0; j < r; ++j) {
    norms[j] = std::sqrt(std::max(wk.col(j).dot(apply_w(wk.col(j))), 0.0));
    max_norm = std::max(max_norm, norms[j]);
  }
  const double drop = rel_drop_tol * max_norm;
  bool completed = false;
  for (int jpos = 0; jpos < r; ++jpos) {
    int sel = -1;
    if (pivot) {
      double best = -1.0;
      for (int c = 0; c < r; ++c)
        if (!used[c] && norms[c] > best) {
          best = norms[c];
          sel = c;
        }
    } else {
      for (int c = 0; c < r; ++c)
        if (!used[c]) {
          sel = c;
          break;
        }
    }
    used[sel] = true;
    Eigen::VectorXd v = wk.col(sel);
    for (int pass = 0; pass < 2; ++pass)
      for (int i = 0; i < jpos; ++i)
        v -= (q.col(i).dot(apply_w(v))) * q.col(i);
    const double nrm = std::sqrt(std::max(v.dot(apply_w(v)), 0.0));
    if (nrm > drop && nrm > 0.0) {
      q.col(jpos) = v / nrm;
    } else {
      completed = true;
      is_completed[jpos] = true;
      for (int attempt = 0; attempt < 64; ++attempt) {
        Eigen::VectorXd w = draw();
        for (int pass = 0; pass < 2; ++pass)
          for (int i = 0; i < jpos; ++i)
            w -= (q.col(i).dot(apply_w(w))) * q.col(i);
        const double wn = std::sqrt(std::max(w.dot(apply_w(w)), 0.0));
        if (wn > 1e-8) {
          q.col(jpos) = w / wn;
          break;
        }
      }
    }
    for (int c = 0; c < r; ++c) {
      if (used[c]) continue;
      wk.col(c) -= (q.col(jpos).dot(apply_w(wk.col(c)))) * q.col(jpos);
      norms[c] = std::sqrt(std::max(wk.col(c).dot(apply_w(wk.col(c))), 0.0));
    }
  }
  Eigen::MatrixXd wa(a.rows(), r);
  for (int j = 0; j < r; ++j) wa.col(j) = apply_w(a0.col(j));
  t_out = q.transpose() * wa;
  for (int j = 0; j < r; ++j)
    if (is_completed[j]) t_out.row(j).setZero();
  a = q;
  return completed;
}

template <class ApplyW, class Draw>
inline bool weighted_mgs(Eigen::MatrixXd& a, Eigen::MatrixXd& t_out,
                         ApplyW&& apply_w, Draw&& draw, double rel_drop_tol) {
  return weighted_qr(a, t_out, apply_w, draw, rel_drop_tol, false);
}

template <class ApplyW, class Draw>
inline bool weighted_pivoted_qr(Eigen::MatrixXd& a, Eigen::MatrixXd& t_out,
                                ApplyW&& apply_w, Draw&& draw,
                                double rel_drop_tol) {
  return weighted_qr(a, t_out, apply_w, draw, rel_drop_tol, true);
}

}  // namespace detail

struct ReorthResult {
  DlrState state;
  bool completed_basis = false;  // true if dependent Y columns were replaced
};

// Reorthonormalize the stochastic basis: factor Y_tilde = Y_new * T in the
// weighted QR sense and transfer T into the deterministic modes, so the
// represented function U_tilde Y_tilde' = U_new Y_new' is unchanged.
inline ReorthResult reorthonormalize(const DiscreteMeasure& mu,
                                     const Eigen::VectorXd& mean,
                                     const Eigen::MatrixXd& u_tilde,
                                     const Eigen::MatrixXd& y_tilde,
                                     double time,
                                     std::uint64_t completion_seed = 0x5eedULL) {
  if (u_tilde.cols() != y_tilde.cols())
    throw std::invalid_argument("reorthonormalize: U/Y rank mismatch");
  ReorthResult out;
  Eigen::MatrixXd y = y_tilde;
  Eigen::MatrixXd t;
  Xoshiro256pp rng(completion_seed);
  auto apply_w = [&mu](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return mu.weights.asDiagonal() * x;
  };
  auto draw = [&]() {
    Eigen::VectorXd w(mu.size());
    for (int k = 0; k < mu.size(); ++k) w[k] = rng.normal();
    w.array() -= mu.weights.dot(w);  // zero-mean completion
    return w;
  };
  out.completed_basis = detail::weighted_mgs(y, t, apply_w, draw, 1e-12);
  out.state.mean = mean;
  out.state.modes_stoch = y;
  out.state.modes_det = u_tilde * t.transpose();
  out.state.time = time;
  out.state.measure_id = mu.id;
  return out;
}

struct KlResult {
  DlrState state;
  Eigen::VectorXd singular_values;  // all, descending
  double reconstruction_error = 0.0;
  bool rank_deficient = false;
};

// Truncated Karhunen-Loeve expansion of per-sample snapshots (dof x N):
// mean = E[u0], (U_i, Y_i) from the leading R eigenpairs of the discrete
// covariance operator in the H inner product, rescaled so E[Y_i^2] = 1.
// Uses the method of snapshots: the N x N weighted Gram matrix
// sqrt(L) X' M X sqrt(L) shares its nonzero spectrum with the covariance.
inline KlResult kl_initialize(const OperatorMatrices& ops,
                              const DiscreteMeasure& mu,
                              const Eigen::MatrixXd& snapshots, int R,
                              std::uint64_t completion_seed = 0x5eedULL) {
  const int n = mu.size();
  if (R < 1) throw std::invalid_argument("kl_initialize: R must be >= 1");
  if (R >= n)
    throw std::invalid_argument("kl_initialize: need more samples than rank");
  if (R > snapshots.rows())
    throw std::invalid_argument("kl_initialize: R exceeds dof count");
  if (snapshots.cols() != n)
    throw std::invalid_argument("kl_initialize: snapshot count != sample count");

  KlResult out;
  out.state.mean = snapshots * mu.weights;
  const Eigen::MatrixXd x = snapshots.colwise() - out.state.mean;
  const Eigen::VectorXd sqw = mu.weights.array().sqrt();
  const Eigen::MatrixXd xw = x * sqw.asDiagonal();
  const Eigen::MatrixXd k = xw.transpose() * (ops.mass * xw);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("kl_initialize: eigensolve failed");

  // descending
  Eigen::VectorXd ev = es.eigenvalues().reverse();
  Eigen::MatrixXd q = es.eigenvectors().rowwise().reverse();
  out.singular_values =
      ev.array().max(0.0).sqrt().matrix();

  const double cutoff =
      std::numeric_limits<double>::epsilon() * std::max(ev(0), 0.0) * n;

  out.state.modes_det.resize(snapshots.rows(), R);
  out.state.modes_stoch.resize(n, R);
  Xoshiro256pp rng(completion_seed);
  for (int i = 0; i < R; ++i) {
    if (ev(i) > cutoff) {
      out.state.modes_stoch.col(i) = q.col(i).array() / sqw.array();
      out.state.modes_det.col(i) = xw * q.col(i);
      // sign convention: largest-magnitude coefficient of U_i positive
      int idx = 0;
      out.state.modes_det.col(i).cwiseAbs().maxCoeff(&idx);
      if (out.state.modes_det(idx, i) < 0.0) {
        out.state.modes_det.col(i) = -out.state.modes_det.col(i);
        out.state.modes_stoch.col(i) = -out.state.modes_stoch.col(i);
      }
    } else {
      out.rank_deficient = true;
      out.state.modes_det.col(i).setZero();
      for (int attempt = 0; attempt < 64; ++attempt) {
        Eigen::VectorXd w(n);
        for (int kk = 0; kk < n; ++kk) w[kk] = rng.normal();
        w.array() -= mu.weights.dot(w);
        for (int pass = 0; pass < 2; ++pass)
          for (int j = 0; j < i; ++j) {
            const double c =
                out.state.modes_stoch.col(j).dot(mu.weights.asDiagonal() * w);
            w -= c * out.state.modes_stoch.col(j);
          }
        const double wn = std::sqrt(
            std::max(w.dot(mu.weights.asDiagonal() * w), 0.0));
        if (wn > 1e-8) {
          out.state.modes_stoch.col(i) = w / wn;
          break;
        }
      }
    }
  }
  // eigenvalues below the noise cutoff are indistinguishable from zero and
  // excluded from the reported truncation error
  double tail = 0.0;
  for (int i = R; i < ev.size(); ++i)
    if (ev(i) > cutoff) tail += ev(i);
  out.reconstruction_error = std::sqrt(tail);
  out.state.measure_id = mu.id;
  out.state.time = 0.0;
  return out;
}

struct DoDiagnostics {
  double do_condition = 0;    // max |<Ytilde_i - Y_i, Y_j>|
  double gram_identity = 0;   // max |<Ytilde', Y> - Id|
  double mean_defect = 0;     // max |E[Ytilde_j]|

  double max() const {
    return std::max(do_condition, std::max(gram_identity, mean_defect));
  }
};

// Checks the discrete DO condition and its companions on a raw (pre-
// reorthonormalization) stochastic update.
inline DoDiagnostics do_residual(const DiscreteMeasure& mu,
                                 const StochasticBasis& y_old,
                                 const Eigen::MatrixXd& y_tilde) {
  check_measure(mu, y_old);
  if (y_tilde.rows() != mu.size() || y_tilde.cols() != y_old.rank())
    throw std::invalid_argument("do_residual: Y_tilde shape mismatch");
  DoDiagnostics d;
  const int r = y_old.rank();
  if (r == 0) return d;
  const Eigen::MatrixXd cross =
      y_tilde.transpose() * (mu.weights.asDiagonal() * y_old.columns);
  const Eigen::MatrixXd old_gram =
      y_old.columns.transpose() * (mu.weights.asDiagonal() * y_old.columns);
  d.do_condition = (cross - old_gram).cwiseAbs().maxCoeff();
  d.gram_identity =
      (cross - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff();
  d.mean_defect = (y_tilde.transpose() * mu.weights).cwiseAbs().maxCoeff();
  return d;
}

struct VariationalResidual {
  double max_abs = 0.0;  // worst residual over the generating test set
  double scale = 0.0;    // magnitude of the balanced terms
};

// Residual of the discrete variational formulation
//   <(u^{n+1}-u^n)/dt, v> + (L(u^n,u^{n+1}), v) = <f, v>
// over the generating test set: deterministic hats, hats times Y^n_j, and
// U_tilde_j times sampled zero-mean directions orthogonal to span(Y^n).
inline VariationalResidual variational_residual(
    const DiscreteMeasure& mu, const OperatorMatrices& ops,
    const DlrState& state_n, const DlrState& state_np1,
    const Eigen::MatrixXd& u_tilde, Scheme scheme, double dt,
    const Forcing& forcing = {}, ForcingRule forcing_rule = ForcingRule::left,
    std::uint64_t seed = 0xd1cULL) {
  const int n = mu.size();
  const int nd = static_cast<int>(state_n.mean.size());
  const int r = state_n.rank();
  const Eigen::MatrixXd un = evaluate_all(state_n, n);
  const Eigen::MatrixXd unp1 = evaluate_all(state_np1, n);

  const double tf = (scheme == Scheme::implicit_euler ||
                     forcing_rule == ForcingRule::right)
                        ? state_np1.time
                        : state_n.time;

  Eigen::MatrixXd res(nd, n);
  VariationalResidual out;
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd lk = Eigen::VectorXd::Zero(nd);
    switch (scheme) {
      case Scheme::explicit_euler:
        apply_stiffness_at(ops, mu, k, un.col(k), lk);
        break;
      case Scheme::semi_implicit:
        lk.noalias() += ops.stiff_mean * unp1.col(k);
        apply_stoch_stiffness_at(ops, mu, k, un.col(k), lk);
        break;
      case Scheme::implicit_euler:
        apply_stiffness_at(ops, mu, k, unp1.col(k), lk);
        break;
    }
    Eigen::VectorXd mdu = ops.mass * ((unp1.col(k) - un.col(k)) / dt);
    Eigen::VectorXd fk =
        forcing ? forcing(tf, k) : Eigen::VectorXd::Zero(nd);
    res.col(k) = mdu + lk - fk;
    out.scale = std::max(out.scale, mdu.cwiseAbs().maxCoeff() +
                                        lk.cwiseAbs().maxCoeff() +
                                        fk.cwiseAbs().maxCoeff());
  }
  out.scale = std::max(out.scale, 1.0);

  // (i) deterministic hats
  const Eigen::VectorXd r0 = res * mu.weights;
  out.max_abs = r0.cwiseAbs().maxCoeff();
  // (ii) hats times Y^n_j
  if (r > 0) {
    const Eigen::MatrixXd rj =
        res * (mu.weights.asDiagonal() * state_n.modes_stoch);
    out.max_abs = std::max(out.max_abs, rj.cwiseAbs().maxCoeff());
  }
  // (iii) U_tilde_j times sampled zero-mean w orthogonal to span(Y^n)
  if (r > 0) {
    const Eigen::MatrixXd s = res.transpose() * u_tilde;  // n x R
    const int ndirs = std::min(n - 1 - r, 2 * r);
    Xoshiro256pp rng(seed);
    Eigen::MatrixXd dirs(n, std::max(ndirs, 0));
    for (int d = 0; d < ndirs; ++d) {
      Eigen::VectorXd w(n);
      for (int k = 0; k < n; ++k) w[k] = rng.normal();
      w.array() -= mu.weights.dot(w);
      w = w - state_n.modes_stoch *
                  (state_n.modes_stoch.transpose() *
                   (mu.weights.asDiagonal() * w));
      for (int pass = 0; pass < 2; ++pass)
        for (int j = 0; j < d; ++j)
          w -= (dirs.col(j).dot(mu.weights.asDiagonal() * w)) * dirs.col(j);
      const double wn =
          std::sqrt(std::max(w.dot(mu.weights.asDiagonal() * w), 0.0));
      if (wn > 1e-12)
        dirs.col(d) = w / wn;
      else
        dirs.col(d).setZero();
    }
    if (ndirs > 0) {
      const Eigen::MatrixXd riii =
          dirs.transpose() * (mu.weights.asDiagonal() * s);
      out.max_abs = std::max(out.max_abs, riii.cwiseAbs().maxCoeff());
    }
  }
  return out;
}

// DLR -> bi-orthogonal form: H-orthonormalize the deterministic modes and
// move the triangular factor into the core matrix.
inline DdoState to_ddo(const OperatorMatrices& ops, const DlrState& s,
                       std::uint64_t completion_seed = 0x5eedULL) {
  DdoState d;
  d.mean = s.mean;
  d.modes_stoch = s.modes_stoch;
  d.time = s.time;
  d.measure_id = s.measure_id;
  Eigen::MatrixXd u = s.modes_det;
  Eigen::MatrixXd t;
  Xoshiro256pp rng(completion_seed);
  auto apply_w = [&ops](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return ops.mass * x;
  };
  auto draw = [&]() {
    Eigen::VectorXd w(u.rows());
    for (int k = 0; k < w.size(); ++k) w[k] = rng.normal();
    return w;
  };
  detail::weighted_mgs(u, t, apply_w, draw, 1e-14);
  d.modes_det = u;
  d.core = t;
  return d;
}

inline DlrState from_ddo(const DdoState& d) {
  DlrState s;
  s.mean = d.mean;
  s.modes_det = d.modes_det * d.core;
  s.modes_stoch = d.modes_stoch;
  s.time = d.time;
  s.measure_id = d.measure_id;
  return s;
}

// --- snapshot serialization (JSON) ---

inline void save_state(const std::string& path, const DlrState& s,
                       const FeSpace& space, const DiscreteMeasure& mu) {
  nlohmann::json j;
  j["format"] = "dlr-state";
  j["version"] = 1;
  j["mesh_n"] = space.mesh.n_per_side;
  j["time"] = s.time;
  j["rank"] = s.rank();
  nlohmann::json jm;
  jm["dim"] = mu.dim();
  jm["weights"] = std::vector<double>(mu.weights.data(),
                                      mu.weights.data() + mu.size());
  std::vector<std::vector<double>> pts(mu.size());
  for (int k = 0; k < mu.size(); ++k) {
    pts[k].resize(mu.dim());
    for (int m = 0; m < mu.dim(); ++m) pts[k][m] = mu.points(k, m);
  }
  jm["points"] = pts;
  j["measure"] = jm;
  j["mean"] = std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size());
  std::vector<std::vector<double>> ud(s.rank()), ys(s.rank());
  for (int c = 0; c < s.rank(); ++c) {
    ud[c].assign(s.modes_det.col(c).data(),
                 s.modes_det.col(c).data() + s.modes_det.rows());
    ys[c].assign(s.modes_stoch.col(c).data(),
                 s.modes_stoch.col(c).data() + s.modes_stoch.rows());
  }
  j["modes_det"] = ud;
  j["modes_stoch"] = ys;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_state: cannot open " + path);
  f << j.dump(2) << "\n";
}

struct LoadedState {
  DlrState state;
  int mesh_n = 0;
  DiscreteMeasure measure;
};

inline LoadedState load_state(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_state: cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != std::string("dlr-state"))
    throw std::runtime_error("load_state: not a dlr-state file");
  LoadedState out;
  out.mesh_n = j.at("mesh_n").get<int>();
  const auto& jm = j.at("measure");
  const auto w = jm.at("weights").get<std::vector<double>>();
  const auto pts = jm.at("points").get<std::vector<std::vector<double>>>();
  const int n = static_cast<int>(w.size());
  const int dim = jm.at("dim").get<int>();
  out.measure.points.resize(n, dim);
  out.measure.weights.resize(n);
  for (int k = 0; k < n; ++k) {
    out.measure.weights[k] = w[k];
    for (int m = 0; m < dim; ++m) out.measure.points(k, m) = pts[k][m];
  }
  out.measure.id = detail::next_measure_id();
  const auto mean = j.at("mean").get<std::vector<double>>();
  out.state.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), mean.size());
  const auto ud = j.at("modes_det").get<std::vector<std::vector<double>>>();
  const auto ys = j.at("modes_stoch").get<std::vector<std::vector<double>>>();
  const int r = static_cast<int>(ud.size());
  out.state.modes_det.resize(mean.size(), r);
  out.state.modes_stoch.resize(n, r);
  for (int c = 0; c < r; ++c) {
    out.state.modes_det.col(c) =
        Eigen::Map<const Eigen::VectorXd>(ud[c].data(), ud[c].size());
    out.state.modes_stoch.col(c) =
        Eigen::Map<const Eigen::VectorXd>(ys[c].data(), ys[c].size());
  }
  out.state.time = j.at("time").get<double>();
  out.state.measure_id = out.measure.id;
  return out;
}

}  // namespace dlr
