#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "dlr/rng.hpp"

namespace dlr {

// Discrete probability measure on Gamma subset of R^M: sample points omega_k
// (rows of `points`) with positive weights lambda_k summing to one.
struct DiscreteMeasure {
  Eigen::MatrixXd points;   // N x M
  Eigen::VectorXd weights;  // N, positive, sum = 1
  std::uint64_t id = 0;

  int dim() const { return static_cast<int>(points.cols()); }
  int size() const { return static_cast<int>(points.rows()); }
};

namespace detail {
inline std::uint64_t next_measure_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace detail

// A random variable on the discrete sample space: one value per sample point.
struct RandomScalar {
  Eigen::VectorXd values;
  std::uint64_t measure_id = 0;
};

// R random variables Y_1..Y_R stored as columns; orthonormal and zero-mean
// under the owning measure when used as a DLR stochastic basis.
struct StochasticBasis {
  Eigen::MatrixXd columns;  // N x R
  std::uint64_t measure_id = 0;

  int rank() const { return static_cast<int>(columns.cols()); }
};

inline void check_measure(const DiscreteMeasure& mu, const RandomScalar& v) {
  if (v.measure_id != mu.id)
    throw std::invalid_argument("RandomScalar belongs to a different measure");
  if (v.values.size() != mu.size())
    throw std::invalid_argument("RandomScalar length does not match measure");
}

inline void check_measure(const DiscreteMeasure& mu, const StochasticBasis& y) {
  if (y.measure_id != mu.id)
    throw std::invalid_argument("StochasticBasis belongs to a different measure");
  if (y.columns.rows() != mu.size())
    throw std::invalid_argument("StochasticBasis length does not match measure");
}

// Gauss-Legendre nodes/weights on [-1,1] (weights sum to 2), by Newton
// iteration on the Legendre recurrence.
inline void gauss_legendre_rule(int n, Eigen::VectorXd& nodes,
                                Eigen::VectorXd& weights) {
  if (n < 1) throw std::invalid_argument("gauss_legendre_rule: n must be >= 1");
  nodes.resize(n);
  weights.resize(n);
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    // recompute p' at the converged node for the weight
    {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
    }
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[i] = -x;
    nodes[n - 1 - i] = x;
    weights[i] = w;
    weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) nodes[n / 2] = 0.0;
}

// Tensor-product Gauss-Legendre rule on [-1,1]^M for the uniform density.
// Weights absorb the 2^-M density factor and are renormalized to sum to one,
// so expectations are plain weighted sums everywhere downstream.
inline DiscreteMeasure gauss_legendre_measure(int M, int n_per_dim,
                                              std::int64_t max_points =
                                                  1'000'000) {
  if (M < 1) throw std::invalid_argument("gauss_legendre_measure: M must be >= 1");
  if (n_per_dim < 1)
    throw std::invalid_argument("gauss_legendre_measure: n_per_dim must be >= 1");
  if (M * std::log(static_cast<double>(n_per_dim)) >
      std::log(static_cast<double>(max_points)) + 1e-12)
    throw std::invalid_argument(
        "gauss_legendre_measure: tensor grid of " + std::to_string(n_per_dim) +
        "^" + std::to_string(M) + " points exceeds the cap of " +
        std::to_string(max_points));

  Eigen::VectorXd x, w;
  gauss_legendre_rule(n_per_dim, x, w);

  std::int64_t total = 1;
  for (int m = 0; m < M; ++m) total *= n_per_dim;

  DiscreteMeasure mu;
  mu.points.resize(total, M);
  mu.weights.resize(total);
  for (std::int64_t k = 0; k < total; ++k) {
    std::int64_t rem = k;
    double wk = 1.0;
    for (int m = 0; m < M; ++m) {
      const int idx = static_cast<int>(rem % n_per_dim);
      rem /= n_per_dim;
      mu.points(k, m) = x[idx];
      wk *= w[idx];
    }
    mu.weights[k] = wk;
  }
  mu.weights /= mu.weights.sum();
  mu.id = detail::next_measure_id();
  return mu;
}

// N iid uniform samples on [-1,1]^M from a seeded xoshiro256++ stream,
// all weights 1/N. Identical seed gives a bit-identical measure.
inline DiscreteMeasure monte_carlo_measure(int M, int N, std::uint64_t seed) {
  if (M < 1) throw std::invalid_argument("monte_carlo_measure: M must be >= 1");
  if (N < 1) throw std::invalid_argument("monte_carlo_measure: N must be >= 1");
  DiscreteMeasure mu;
  mu.points.resize(N, M);
  mu.weights = Eigen::VectorXd::Constant(N, 1.0 / N);
  Xoshiro256pp rng(seed);
  for (int k = 0; k < N; ++k)
    for (int m = 0; m < M; ++m) mu.points(k, m) = rng.uniform_sym();
  mu.id = detail::next_measure_id();
  return mu;
}

inline double expect(const DiscreteMeasure& mu, const RandomScalar& v) {
  check_measure(mu, v);
  return mu.weights.dot(v.values);
}

// <v,w> in L2 of the discrete measure
inline double inner(const DiscreteMeasure& mu, const RandomScalar& v,
                    const RandomScalar& w) {
  check_measure(mu, v);
  check_measure(mu, w);
  return (mu.weights.array() * v.values.array() * w.values.array()).sum();
}

inline RandomScalar center(const DiscreteMeasure& mu, const RandomScalar& v) {
  check_measure(mu, v);
  RandomScalar out;
  out.measure_id = v.measure_id;
  out.values = v.values.array() - mu.weights.dot(v.values);
  return out;
}

// max_{i,j} |<Y_i,Y_j> - delta_ij|, i.e. how far the basis is from orthonormal.
inline double orthonormality_defect(const DiscreteMeasure& mu,
                                    const StochasticBasis& y) {
  check_measure(mu, y);
  const Eigen::MatrixXd g =
      y.columns.transpose() * mu.weights.asDiagonal() * y.columns;
  const int r = y.rank();
  return (g - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff();
}

inline double mean_defect(const DiscreteMeasure& mu, const StochasticBasis& y) {
  check_measure(mu, y);
  if (y.rank() == 0) return 0.0;
  return (y.columns.transpose() * mu.weights).cwiseAbs().maxCoeff();
}

namespace detail {
inline void require_orthonormal(const DiscreteMeasure& mu,
                                const StochasticBasis& y, double tol_ortho) {
  if (y.rank() > 0 && (orthonormality_defect(mu, y) > tol_ortho ||
                       mean_defect(mu, y) > tol_ortho))
    throw std::invalid_argument(
        "StochasticBasis is not orthonormal/zero-mean within tol_ortho");
}
}  // namespace detail

// P_Y[v] = sum_j <v,Y_j> Y_j
inline RandomScalar project_span(const DiscreteMeasure& mu,
                                 const StochasticBasis& y,
                                 const RandomScalar& v,
                                 double tol_ortho = 1e-10) {
  check_measure(mu, v);
  detail::require_orthonormal(mu, y, tol_ortho);
  RandomScalar out;
  out.measure_id = v.measure_id;
  const Eigen::VectorXd c =
      y.columns.transpose() * (mu.weights.asDiagonal() * v.values);
  out.values = y.columns * c;
  return out;
}

// P_Y^perp[v] = v - P_Y[v]
inline RandomScalar project_complement(const DiscreteMeasure& mu,
                                       const StochasticBasis& y,
                                       const RandomScalar& v,
                                       double tol_ortho = 1e-10) {
  RandomScalar p = project_span(mu, y, v, tol_ortho);
  p.values = v.values - p.values;
  return p;
}

// --- matrix-level helpers used by the integrators ---

// subtract the weighted column means: each column becomes zero-mean
inline Eigen::MatrixXd center_columns(const DiscreteMeasure& mu,
                                      const Eigen::MatrixXd& a) {
  const Eigen::RowVectorXd means = mu.weights.transpose() * a;
  return a.rowwise() - means;
}

// remove the component of every column of `a` lying in span of Y's columns
inline Eigen::MatrixXd project_off_columns(const DiscreteMeasure& mu,
                                           const Eigen::MatrixXd& y,
                                           const Eigen::MatrixXd& a) {
  if (y.cols() == 0) return a;
  return a - y * (y.transpose() * (mu.weights.asDiagonal() * a));
}

}  // namespace dlr
