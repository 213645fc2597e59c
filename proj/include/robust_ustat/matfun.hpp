#pragma once

// Spectral calculus on real symmetric matrices: eigendecomposition, lifting
// scalar functions to matrices, the psi / Psi influence pair, the Hermitian
// dilation and the matrix norms used throughout the library.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/matrix.hpp"

namespace robust_ustat {

/// Eigenvalues sorted ascending, eigenvectors stored as orthonormal columns.
struct EigenDecomp {
  Vector eigenvalues;
  Matrix eigenvectors;

  Matrix reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  }
};

inline EigenDecomp eigh(const SymMatrix& a) {
  detail::require_finite(a.matrix(), "eigh");
  const Index d = a.dim();
  if (d == 0) return {Vector(0), Matrix(0, 0)};
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a.matrix(), Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw InvalidMatrix("eigh: eigensolver did not converge");
  }
  // Eigen already sorts ascending; the stable pass pins the tie order to the
  // solver's column order.
  std::vector<Index> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), Index{0});
  const Vector& ev = solver.eigenvalues();
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return ev(i) < ev(j); });
  EigenDecomp out{Vector(d), Matrix(d, d)};
  for (Index k = 0; k < d; ++k) {
    out.eigenvalues(k) = ev(order[static_cast<std::size_t>(k)]);
    out.eigenvectors.col(k) = solver.eigenvectors().col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

inline Vector eigvalsh(const SymMatrix& a) {
  detail::require_finite(a.matrix(), "eigvalsh");
  if (a.dim() == 0) return Vector(0);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a.matrix(), Eigen::EigenvaluesOnly);
  return solver.eigenvalues();
}

/// f(A) = U f(Lambda) U^T.
template <class F>
SymMatrix apply_spectral(const EigenDecomp& ed, F&& f) {
  const Index d = ed.eigenvalues.size();
  Vector fv(d);
  for (Index k = 0; k < d; ++k) {
    const double y = f(ed.eigenvalues(k));
    if (!std::isfinite(y)) {
      throw SpectralDomainError("apply_spectral: f(" + std::to_string(ed.eigenvalues(k)) +
                                ") is not finite");
    }
    fv(k) = y;
  }
  return SymMatrix::symmetrize(ed.eigenvectors * fv.asDiagonal() * ed.eigenvectors.transpose());
}

template <class F>
SymMatrix apply_spectral(const SymMatrix& a, F&& f) {
  return apply_spectral(eigh(a), std::forward<F>(f));
}

/// Bounded influence function: x - sign(x) x^2/2 on [-1, 1], +-1/2 outside.
inline double psi(double x) {
  if (x > 1.0) return 0.5;
  if (x < -1.0) return -0.5;
  return x - std::copysign(x * x, x) / 2.0;
}

/// Convex antiderivative of psi with Psi(0) = 0.
inline double Psi(double x) {
  const double ax = std::abs(x);
  if (ax <= 1.0) return x * x / 2.0 - ax * ax * ax / 6.0;
  return 1.0 / 3.0 + (ax - 1.0) / 2.0;
}

inline SymMatrix psi_mat(const SymMatrix& a) { return apply_spectral(a, psi); }
inline SymMatrix Psi_mat(const SymMatrix& a) { return apply_spectral(a, Psi); }

/// D(A) = [[0, A], [A^T, 0]].
inline SymMatrix dilation(const RectMatrix& a) {
  const Index r = a.rows();
  const Index c = a.cols();
  Matrix out = Matrix::Zero(r + c, r + c);
  out.topRightCorner(r, c) = a.matrix();
  out.bottomLeftCorner(c, r) = a.matrix().transpose();
  return SymMatrix::symmetrize(out);
}

// ---------------------------------------------------------------------------
// Norms

inline double op_norm(const SymMatrix& a) {
  if (a.dim() == 0) return 0.0;
  const Vector ev = eigvalsh(a);
  return std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
}

inline Vector singular_values(const RectMatrix& a) {
  if (a.rows() == 0 || a.cols() == 0) return Vector(0);
  Eigen::JacobiSVD<Matrix> svd(a.matrix());
  return svd.singularValues();
}

inline double op_norm(const RectMatrix& a) {
  const Vector s = singular_values(a);
  return s.size() == 0 ? 0.0 : s.maxCoeff();
}

inline double frob_norm(const SymMatrix& a) { return a.matrix().norm(); }
inline double frob_norm(const RectMatrix& a) { return a.matrix().norm(); }

inline double nuclear_norm(const SymMatrix& a) { return eigvalsh(a).cwiseAbs().sum(); }
inline double nuclear_norm(const RectMatrix& a) { return singular_values(a).sum(); }

inline double max_norm(const SymMatrix& a) {
  return a.dim() == 0 ? 0.0 : a.matrix().cwiseAbs().maxCoeff();
}
inline double max_norm(const RectMatrix& a) {
  return a.matrix().size() == 0 ? 0.0 : a.matrix().cwiseAbs().maxCoeff();
}

/// Number of eigenvalues with |lambda| > rel_tol * ||A||.
inline Index numerical_rank(const SymMatrix& a, double rel_tol = 1e-10) {
  if (a.dim() == 0) return 0;
  const Vector ev = eigvalsh(a);
  const double norm = ev.cwiseAbs().maxCoeff();
  if (norm == 0.0) return 0;
  return (ev.array().abs() > rel_tol * norm).count();
}

/// r(A) = tr(A) / ||A|| for nonnegative definite A. Eigenvalues below
/// -1e-10 ||A|| are rejected, smaller negative parts are clamped to zero.
inline double effective_rank(const SymMatrix& a) {
  const Vector ev = eigvalsh(a);
  const double norm = ev.size() == 0 ? 0.0 : ev.cwiseAbs().maxCoeff();
  if (norm == 0.0) throw EffectiveRankUndefined("effective_rank: zero matrix");
  if (ev(0) < -1e-10 * norm) {
    throw InvalidMatrix("effective_rank: matrix is not nonnegative definite (lambda_min = " +
                        std::to_string(ev(0)) + ")");
  }
  const Vector clamped = ev.cwiseMax(0.0);
  return clamped.sum() / clamped.maxCoeff();
}

inline SymMatrix hadamard(const SymMatrix& a, const SymMatrix& b) {
  if (a.dim() != b.dim()) {
    throw DimError("hadamard: dimension mismatch " + std::to_string(a.dim()) + " vs " +
                   std::to_string(b.dim()));
  }
  return SymMatrix::symmetrize(a.matrix().cwiseProduct(b.matrix()));
}

}  // namespace robust_ustat
