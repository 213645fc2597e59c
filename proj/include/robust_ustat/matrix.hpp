#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "robust_ustat/errors.hpp"

namespace robust_ustat {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline bool all_finite(const Matrix& a) { return a.allFinite(); }

inline void require_finite(const Matrix& a, const char* what) {
  if (!all_finite(a)) {
    throw InvalidMatrix(std::string(what) + ": non-finite entry");
  }
}

}  // namespace detail

/// Dense real symmetric matrix. Construction from a general square matrix
/// symmetrizes via (A + A^T)/2 after checking that the input is already
/// symmetric up to 1e-8 * ||A||_F.
class SymMatrix {
 public:
  static constexpr double kAsymmetryTolerance = 1e-8;

  SymMatrix() = default;

  explicit SymMatrix(Index dim) : m_(Matrix::Zero(dim, dim)) {}

  explicit SymMatrix(const Matrix& a) {
    if (a.rows() != a.cols()) {
      throw DimError("SymMatrix: matrix is " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + ", expected square");
    }
    detail::require_finite(a, "SymMatrix");
    const double asym = (a - a.transpose()).norm();
    if (asym > kAsymmetryTolerance * a.norm()) {
      throw InvalidMatrix("SymMatrix: asymmetry " + std::to_string(asym) +
                          " exceeds tolerance");
    }
    m_ = 0.5 * (a + a.transpose());
  }

  /// Symmetrizes without the asymmetry check. For results of computations
  /// that are symmetric in exact arithmetic.
  static SymMatrix symmetrize(const Matrix& a) {
    if (a.rows() != a.cols()) throw DimError("SymMatrix::symmetrize: not square");
    SymMatrix s;
    s.m_ = 0.5 * (a + a.transpose());
    return s;
  }

  static SymMatrix zeros(Index dim) { return SymMatrix(dim); }
  static SymMatrix identity(Index dim) {
    SymMatrix s;
    s.m_ = Matrix::Identity(dim, dim);
    return s;
  }
  static SymMatrix diagonal(const Vector& diag) {
    SymMatrix s;
    s.m_ = diag.asDiagonal();
    return s;
  }
  /// v v^T scaled by `scale`.
  static SymMatrix outer(const Vector& v, double scale = 1.0) {
    SymMatrix s;
    s.m_ = scale * v * v.transpose();
    return s;
  }

  Index dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }
  double trace() const { return m_.trace(); }

  SymMatrix& operator+=(const SymMatrix& o) {
    check_same_dim(o);
    m_ += o.m_;
    return *this;
  }
  SymMatrix& operator-=(const SymMatrix& o) {
    check_same_dim(o);
    m_ -= o.m_;
    return *this;
  }
  SymMatrix& operator*=(double c) {
    m_ *= c;
    return *this;
  }

  friend SymMatrix operator+(SymMatrix a, const SymMatrix& b) { return a += b; }
  friend SymMatrix operator-(SymMatrix a, const SymMatrix& b) { return a -= b; }
  friend SymMatrix operator*(SymMatrix a, double c) { return a *= c; }
  friend SymMatrix operator*(double c, SymMatrix a) { return a *= c; }
  friend SymMatrix operator-(SymMatrix a) { return a *= -1.0; }

  /// Q A Q^T.
  SymMatrix conjugated(const Matrix& q) const {
    return symmetrize(q * m_ * q.transpose());
  }

 private:
  void check_same_dim(const SymMatrix& o) const {
    if (o.dim() != dim()) {
      throw DimError("SymMatrix: dimension mismatch " + std::to_string(dim()) +
                     " vs " + std::to_string(o.dim()));
    }
  }

  Matrix m_;
};

/// Real rectangular matrix with finite entries.
class RectMatrix {
 public:
  RectMatrix() = default;
  explicit RectMatrix(const Matrix& a) : m_(a) { detail::require_finite(a, "RectMatrix"); }
  RectMatrix(Index rows, Index cols) : m_(Matrix::Zero(rows, cols)) {}

  Index rows() const { return m_.rows(); }
  Index cols() const { return m_.cols(); }
  const Matrix& matrix() const { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }

 private:
  Matrix m_;
};

}  // namespace robust_ustat
