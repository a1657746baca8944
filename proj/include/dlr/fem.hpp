#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "dlr/measure.hpp"

namespace dlr {

using SparseMat = Eigen::SparseMatrix<double>;
using ScalarField = std::function<double(double, double)>;

// Uniform triangulation of the unit square: n_per_side x n_per_side cells,
// each split into two congruent right triangles along the (i,j)->(i+1,j+1)
// diagonal.
struct Mesh {
  int n_per_side = 0;
  double h = 0.0;  // element size, 1/n_per_side
  Eigen::MatrixX2d vertices;
  Eigen::MatrixX3i triangles;
};

// P1 space with homogeneous Dirichlet conditions: only interior vertices
// carry degrees of freedom.
struct FeSpace {
  Mesh mesh;
  std::vector<int> interior_dofs;   // dof -> vertex index
  std::vector<int> vertex_to_dof;   // vertex -> dof index or -1
  int dof_count = 0;
};

struct FeFunction {
  Eigen::VectorXd coeffs;

  bool finite() const { return coeffs.allFinite(); }
};

// a(x,xi) = mean_field(x) + sum_m terms[m](x) * xi_m
struct AffineDiffusion {
  ScalarField mean_field;
  std::vector<ScalarField> terms;
  double a_min = std::numeric_limits<double>::quiet_NaN();
  double a_max = std::numeric_limits<double>::quiet_NaN();
};

struct OperatorMatrices {
  SparseMat mass;                    // <phi_j, phi_i>, interior dofs
  SparseMat stiff_mean;              // <mean_field grad phi_j, grad phi_i>
  std::vector<SparseMat> stiff_terms;
  SparseMat stiff_laplace;           // coefficient 1 (V seminorm)
  SparseMat mass_full;               // all vertices, boundary included
};

struct ConstantsReport {
  double C_I = 0;     // inverse inequality, p = 1
  double C_B = 0;     // continuity (sampled sup of a)
  double C_L = 0;     // coercivity (sampled inf of a)
  double C_P = 0;     // Poincare, reporting only
  double C_det = 0;   // inf mean_field / a over sampled nodes
  double K_explicit = 0;  // 2 / (C_I^2 C_B)
};

inline FeSpace build_space(int n_per_side) {
  if (n_per_side < 2)
    throw std::invalid_argument(
        "build_space: n_per_side must be >= 2 to have interior dofs");
  FeSpace sp;
  Mesh& mesh = sp.mesh;
  mesh.n_per_side = n_per_side;
  mesh.h = 1.0 / n_per_side;
  const int nv = (n_per_side + 1) * (n_per_side + 1);
  mesh.vertices.resize(nv, 2);
  for (int j = 0; j <= n_per_side; ++j)
    for (int i = 0; i <= n_per_side; ++i) {
      const int v = j * (n_per_side + 1) + i;
      mesh.vertices(v, 0) = i * mesh.h;
      mesh.vertices(v, 1) = j * mesh.h;
    }
  mesh.triangles.resize(2 * n_per_side * n_per_side, 3);
  int t = 0;
  for (int j = 0; j < n_per_side; ++j)
    for (int i = 0; i < n_per_side; ++i) {
      const int v00 = j * (n_per_side + 1) + i;
      const int v10 = v00 + 1;
      const int v01 = v00 + (n_per_side + 1);
      const int v11 = v01 + 1;
      mesh.triangles.row(t++) << v00, v10, v11;
      mesh.triangles.row(t++) << v00, v11, v01;
    }
  sp.vertex_to_dof.assign(nv, -1);
  for (int j = 1; j < n_per_side; ++j)
    for (int i = 1; i < n_per_side; ++i) {
      const int v = j * (n_per_side + 1) + i;
      sp.vertex_to_dof[v] = static_cast<int>(sp.interior_dofs.size());
      sp.interior_dofs.push_back(v);
    }
  sp.dof_count = static_cast<int>(sp.interior_dofs.size());
  return sp;
}

namespace detail {

// 3-point edge-midpoint rule, exact for quadratics. P1 gradients are constant
// per element, so stiffness entries reduce to (mean of a over midpoints) times
// the constant-coefficient element matrix; quadrature then commutes with the
// affine sum in the coefficient, keeping the affine reconstruction exact.
struct ElementGeometry {
  double area;
  Eigen::Matrix<double, 3, 2> grads;
  Eigen::Matrix<double, 3, 2> midpoints;
};

inline ElementGeometry element_geometry(const Mesh& mesh, int t) {
  ElementGeometry g;
  Eigen::Matrix<double, 3, 2> p;
  for (int a = 0; a < 3; ++a) p.row(a) = mesh.vertices.row(mesh.triangles(t, a));
  Eigen::Matrix2d B;
  B << p(1, 0) - p(0, 0), p(2, 0) - p(0, 0), p(1, 1) - p(0, 1),
      p(2, 1) - p(0, 1);
  const double det = B(0, 0) * B(1, 1) - B(0, 1) * B(1, 0);
  g.area = std::abs(det) / 2.0;
  const Eigen::Matrix2d Binv = B.inverse();
  Eigen::Matrix<double, 3, 2> ref;
  ref << -1, -1, 1, 0, 0, 1;
  g.grads = ref * Binv;
  g.midpoints.row(0) = 0.5 * (p.row(0) + p.row(1));
  g.midpoints.row(1) = 0.5 * (p.row(1) + p.row(2));
  g.midpoints.row(2) = 0.5 * (p.row(2) + p.row(0));
  return g;
}

inline double field_mean_on_element(const ScalarField& f,
                                    const ElementGeometry& g) {
  double s = 0.0;
  for (int q = 0; q < 3; ++q) s += f(g.midpoints(q, 0), g.midpoints(q, 1));
  return s / 3.0;
}

}  // namespace detail

inline OperatorMatrices assemble(const FeSpace& sp, const AffineDiffusion& diff) {
  const Mesh& mesh = sp.mesh;
  const int nd = sp.dof_count;
  const int nv = static_cast<int>(mesh.vertices.rows());
  const int nterms = static_cast<int>(diff.terms.size());

  using T = Eigen::Triplet<double>;
  std::vector<T> t_mass, t_lap, t_mean, t_mass_full;
  std::vector<std::vector<T>> t_terms(nterms);

  Eigen::Matrix3d ref_mass;
  ref_mass << 2, 1, 1, 1, 2, 1, 1, 1, 2;

  for (int t = 0; t < mesh.triangles.rows(); ++t) {
    const auto g = detail::element_geometry(mesh, t);
    const Eigen::Matrix3d ke = g.area * (g.grads * g.grads.transpose());
    const Eigen::Matrix3d me = (g.area / 12.0) * ref_mass;
    const double abar = detail::field_mean_on_element(diff.mean_field, g);
    std::vector<double> tbar(nterms);
    for (int m = 0; m < nterms; ++m)
      tbar[m] = detail::field_mean_on_element(diff.terms[m], g);
    for (int a = 0; a < 3; ++a) {
      const int va = mesh.triangles(t, a);
      for (int b = 0; b < 3; ++b) {
        const int vb = mesh.triangles(t, b);
        t_mass_full.emplace_back(va, vb, me(a, b));
        const int ia = sp.vertex_to_dof[va];
        const int ib = sp.vertex_to_dof[vb];
        if (ia < 0 || ib < 0) continue;
        t_mass.emplace_back(ia, ib, me(a, b));
        t_lap.emplace_back(ia, ib, ke(a, b));
        t_mean.emplace_back(ia, ib, abar * ke(a, b));
        for (int m = 0; m < nterms; ++m)
          t_terms[m].emplace_back(ia, ib, tbar[m] * ke(a, b));
      }
    }
  }

  OperatorMatrices ops;
  ops.mass.resize(nd, nd);
  ops.mass.setFromTriplets(t_mass.begin(), t_mass.end());
  ops.stiff_laplace.resize(nd, nd);
  ops.stiff_laplace.setFromTriplets(t_lap.begin(), t_lap.end());
  ops.stiff_mean.resize(nd, nd);
  ops.stiff_mean.setFromTriplets(t_mean.begin(), t_mean.end());
  ops.stiff_terms.resize(nterms);
  for (int m = 0; m < nterms; ++m) {
    ops.stiff_terms[m].resize(nd, nd);
    ops.stiff_terms[m].setFromTriplets(t_terms[m].begin(), t_terms[m].end());
  }
  ops.mass_full.resize(nv, nv);
  ops.mass_full.setFromTriplets(t_mass_full.begin(), t_mass_full.end());

  Eigen::SimplicialLLT<SparseMat> chol(ops.mass);
  if (chol.info() != Eigen::Success)
    throw std::runtime_error("assemble: mass matrix is not positive definite");
  return ops;
}

// Stiffness at a single sample point via the affine reconstruction.
inline SparseMat stiffness_at(const OperatorMatrices& ops,
                              const DiscreteMeasure& mu, int k) {
  SparseMat a = ops.stiff_mean;
  for (std::size_t m = 0; m < ops.stiff_terms.size(); ++m)
    a += mu.points(k, static_cast<int>(m)) * ops.stiff_terms[m];
  return a;
}

// y += (stiff_mean + sum_m omega_{k,m} stiff_terms[m]) * x without forming
// the per-sample matrix.
inline void apply_stiffness_at(const OperatorMatrices& ops,
                               const DiscreteMeasure& mu, int k,
                               const Eigen::VectorXd& x, Eigen::VectorXd& y) {
  y.noalias() += ops.stiff_mean * x;
  for (std::size_t m = 0; m < ops.stiff_terms.size(); ++m)
    y.noalias() += mu.points(k, static_cast<int>(m)) * (ops.stiff_terms[m] * x);
}

inline void apply_stoch_stiffness_at(const OperatorMatrices& ops,
                                     const DiscreteMeasure& mu, int k,
                                     const Eigen::VectorXd& x,
                                     Eigen::VectorXd& y) {
  for (std::size_t m = 0; m < ops.stiff_terms.size(); ++m)
    y.noalias() += mu.points(k, static_cast<int>(m)) * (ops.stiff_terms[m] * x);
}

// sqrt( sum_k lambda_k u_k' mass u_k ) over per-sample coefficient columns
inline double norm_H(const OperatorMatrices& ops, const DiscreteMeasure& mu,
                     const Eigen::MatrixXd& snapshots) {
  double s = 0.0;
  for (int k = 0; k < mu.size(); ++k)
    s += mu.weights[k] * snapshots.col(k).dot(ops.mass * snapshots.col(k));
  return std::sqrt(std::max(s, 0.0));
}

inline double norm_V(const OperatorMatrices& ops, const DiscreteMeasure& mu,
                     const Eigen::MatrixXd& snapshots) {
  double s = 0.0;
  for (int k = 0; k < mu.size(); ++k)
    s += mu.weights[k] *
         snapshots.col(k).dot(ops.stiff_laplace * snapshots.col(k));
  return std::sqrt(std::max(s, 0.0));
}

// energy norm: per-sample stiffness from the affine reconstruction
inline double norm_energy(const OperatorMatrices& ops,
                          const DiscreteMeasure& mu,
                          const Eigen::MatrixXd& snapshots) {
  double s = 0.0;
  Eigen::VectorXd av(snapshots.rows());
  for (int k = 0; k < mu.size(); ++k) {
    av.setZero();
    apply_stiffness_at(ops, mu, k, snapshots.col(k), av);
    s += mu.weights[k] * snapshots.col(k).dot(av);
  }
  return std::sqrt(std::max(s, 0.0));
}

// smallest/largest generalized eigenvalues of (A, B), dense solve
inline std::pair<double, double> generalized_eigen_bounds(const SparseMat& a,
                                                          const SparseMat& b) {
  const Eigen::MatrixXd ad(a), bd(b);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(ad, bd,
                                                               Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("generalized_eigen_bounds: eigensolve failed");
  const auto& ev = es.eigenvalues();
  return {ev(0), ev(ev.size() - 1)};
}

// Sampled bounds of a over element quadrature points x measure points.
inline std::pair<double, double> sampled_coefficient_bounds(
    const FeSpace& sp, const DiscreteMeasure& mu, const AffineDiffusion& diff) {
  const Mesh& mesh = sp.mesh;
  const int nterms = static_cast<int>(diff.terms.size());
  if (nterms > mu.dim())
    throw std::invalid_argument(
        "sampled_coefficient_bounds: more diffusion terms than measure dims");
  double amin = std::numeric_limits<double>::infinity();
  double amax = -amin;
  for (int t = 0; t < mesh.triangles.rows(); ++t) {
    const auto g = detail::element_geometry(mesh, t);
    for (int q = 0; q < 3; ++q) {
      const double x = g.midpoints(q, 0), y = g.midpoints(q, 1);
      const double abar = diff.mean_field(x, y);
      Eigen::VectorXd tv(nterms);
      for (int m = 0; m < nterms; ++m) tv[m] = diff.terms[m](x, y);
      for (int k = 0; k < mu.size(); ++k) {
        double a = abar;
        for (int m = 0; m < nterms; ++m) a += tv[m] * mu.points(k, m);
        amin = std::min(amin, a);
        amax = std::max(amax, a);
      }
    }
  }
  return {amin, amax};
}

inline ConstantsReport estimate_constants(const FeSpace& sp,
                                          const DiscreteMeasure& mu,
                                          const AffineDiffusion& diff,
                                          const OperatorMatrices& ops) {
  ConstantsReport r;
  const auto [lmin, lmax] = generalized_eigen_bounds(ops.stiff_laplace, ops.mass);
  r.C_I = sp.mesh.h * std::sqrt(lmax);
  r.C_P = 1.0 / std::sqrt(lmin);
  const auto [amin, amax] = sampled_coefficient_bounds(sp, mu, diff);
  if (amin <= 0.0)
    throw std::runtime_error(
        "estimate_constants: sampled diffusion coefficient is not positive");
  r.C_L = amin;
  r.C_B = amax;

  // C_det = inf mean_field / a over the same quadrature-by-sample nodes
  double cdet = std::numeric_limits<double>::infinity();
  const int nterms = static_cast<int>(diff.terms.size());
  for (int t = 0; t < sp.mesh.triangles.rows(); ++t) {
    const auto g = detail::element_geometry(sp.mesh, t);
    for (int q = 0; q < 3; ++q) {
      const double x = g.midpoints(q, 0), y = g.midpoints(q, 1);
      const double abar = diff.mean_field(x, y);
      Eigen::VectorXd tv(nterms);
      for (int m = 0; m < nterms; ++m) tv[m] = diff.terms[m](x, y);
      for (int k = 0; k < mu.size(); ++k) {
        double a = abar;
        for (int m = 0; m < nterms; ++m) a += tv[m] * mu.points(k, m);
        cdet = std::min(cdet, abar / a);
      }
    }
  }
  r.C_det = cdet;
  r.K_explicit = 2.0 / (r.C_I * r.C_I * r.C_B);
  return r;
}

// The shipped random-diffusion coefficient:
//   a(x,xi) = a0 + sum_{m=1..M} (cos(2 pi m x1) + cos(2 pi m x2)) / (m^2 pi^2) xi_m
inline AffineDiffusion make_cosine_diffusion(double a0, int M) {
  AffineDiffusion d;
  d.mean_field = [a0](double, double) { return a0; };
  const double pi = 3.14159265358979323846;
  for (int m = 1; m <= M; ++m) {
    d.terms.push_back([m, pi](double x, double y) {
      return (std::cos(2 * pi * m * x) + std::cos(2 * pi * m * y)) /
             (m * m * pi * pi);
    });
  }
  double worst = 0.0;
  for (int m = 1; m <= M; ++m) worst += 2.0 / (m * m * pi * pi);
  d.a_min = a0 - worst;
  d.a_max = a0 + worst;
  return d;
}

// Nodal interpolant of a scalar function on the interior dofs.
inline Eigen::VectorXd interpolate(const FeSpace& sp, const ScalarField& f) {
  Eigen::VectorXd v(sp.dof_count);
  for (int i = 0; i < sp.dof_count; ++i) {
    const int vert = sp.interior_dofs[i];
    v[i] = f(sp.mesh.vertices(vert, 0), sp.mesh.vertices(vert, 1));
  }
  return v;
}

}  // namespace dlr
