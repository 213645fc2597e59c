#pragma once

// Covariance estimation through the pairwise-difference kernel
// H(y1, y2) = (y1 - y2)(y1 - y2)^T / 2, whose U-statistic is the unbiased
// sample covariance and whose robust counterpart needs no mean estimate.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/robust.hpp"
#include "robust_ustat/ustat.hpp"

namespace robust_ustat {

struct CovEstimate {
  SymMatrix matrix;
  RobustParams params_used;
  SolveReport report;
};

/// Symmetric weighting mask for masked covariance estimation.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  explicit MaskMatrix(const Matrix& m) : m_(m) {}
  explicit MaskMatrix(SymMatrix m) : m_(std::move(m)) {}

  Index dim() const { return m_.dim(); }
  const SymMatrix& matrix() const { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }

  MaskMatrix scaled(double c) const { return MaskMatrix(m_ * c); }

 private:
  SymMatrix m_;
};

/// Empirical moment quantities of the sample distribution.
struct MomentProxies {
  /// sup over unit v of E^{1/4} <v, Y - EY>^4 (lower bound: max over probed directions)
  double nu4 = 0.0;
  /// max_j E^{1/4} (Y_j - EY_j)^4
  double mu4 = 0.0;
  /// kurtosis of linear forms, max over probed directions
  double kurtosis_K = 0.0;
  /// kurtosis of coordinates, max over j
  double kurtosis_Kprime = 0.0;
};

namespace detail {

inline void check_sample_length(const TupleView& x, Index dim, const char* who) {
  if (x[0].size() != dim || x[1].size() != dim) {
    throw DimError(std::string(who) + ": samples have length " + std::to_string(x[0].size()) + ", expected " +
                   std::to_string(dim));
  }
}

}  // namespace detail

/// H(y1, y2) = (y1 - y2)(y1 - y2)^T / 2, exposed as a rank-one kernel.
inline KernelSpec pairwise_kernel(Index dim) {
  return KernelSpec(
      2, dim,
      [dim](const TupleView& x) -> Matrix {
        detail::check_sample_length(x, dim, "pairwise kernel");
        const Vector v = x[0] - x[1];
        return 0.5 * v * v.transpose();
      },
      [dim](const TupleView& x, Vector& v) {
        detail::check_sample_length(x, dim, "pairwise kernel");
        v = x[0] - x[1];
        return 0.5;
      });
}

/// M o H(y1, y2).
inline KernelSpec masked_kernel(const MaskMatrix& mask) {
  const Matrix m = mask.matrix().matrix();
  return KernelSpec(2, mask.dim(), [m](const TupleView& x) -> Matrix {
    detail::check_sample_length(x, m.rows(), "masked kernel");
    const Vector v = x[0] - x[1];
    return 0.5 * m.cwiseProduct(v * v.transpose());
  });
}

/// Unbiased sample covariance (1/(n-1) normalization).
inline SymMatrix sample_covariance(const Dataset& data) {
  const Index n = data.size();
  if (n < 2) throw InsufficientData("sample_covariance: need at least 2 samples");
  const Vector mean = data.samples().rowwise().mean();
  const Matrix centered = data.samples().colwise() - mean;
  return SymMatrix::symmetrize(centered * centered.transpose() / static_cast<double>(n - 1));
}

/// Eigenvalues clipped at zero.
inline SymMatrix psd_project(const SymMatrix& a) {
  return apply_spectral(a, [](double x) { return std::max(x, 0.0); });
}

/// Robust covariance with theta = (1/sigma) sqrt(2t / floor(n/2)).
inline CovEstimate robust_covariance(const Dataset& data, double sigma, double t,
                                     const SolverOptions& opts = {}, bool project_psd = false) {
  if (data.size() < 2) throw InsufficientData("robust_covariance: need at least 2 samples");
  const RobustParams params = theta_from_sigma(sigma, t, data.size() / 2);
  const KernelSpec kernel = pairwise_kernel(data.dim());
  CovEstimate out{SymMatrix(), params, solve(data, kernel, params, opts)};
  out.matrix = project_psd ? psd_project(out.report.estimate) : out.report.estimate;
  return out;
}

/// Robust estimate of M o Sigma with theta = (1/Delta) sqrt(2t / floor(n/2)).
inline CovEstimate masked_robust_covariance(const Dataset& data, const MaskMatrix& mask, double delta,
                                            double t, const SolverOptions& opts = {}) {
  if (data.size() < 2) throw InsufficientData("masked_robust_covariance: need at least 2 samples");
  if (mask.dim() != data.dim()) {
    throw DimError("masked_robust_covariance: mask is " + std::to_string(mask.dim()) + "x" +
                   std::to_string(mask.dim()) + " but samples have length " + std::to_string(data.dim()));
  }
  const RobustParams params = theta_from_sigma(delta, t, data.size() / 2);
  const KernelSpec kernel = masked_kernel(mask);
  CovEstimate out{SymMatrix(), params, solve(data, kernel, params, opts)};
  out.matrix = out.report.estimate;
  return out;
}

/// sqrt(K r(Sigma)) ||Sigma||, an upper bound on ||E(H - EH)^2||^{1/2} when the
/// kurtosis of linear forms is at most K.
inline double sigma_proxy_linear(double kurtosis, const SymMatrix& sigma) {
  if (!(kurtosis >= 1.0)) throw ParamError("sigma_proxy_linear: kurtosis bound must be >= 1");
  return std::sqrt(kurtosis * effective_rank(sigma)) * op_norm(sigma);
}

/// Largest Euclidean norm of a column of M.
inline double mask_one_to_two_norm(const MaskMatrix& mask) {
  if (mask.dim() == 0) return 0.0;
  return mask.matrix().matrix().colwise().norm().maxCoeff();
}

/// sqrt(2) ||M||_{1->2} nu4 mu4.
inline double mask_delta_proxy(const MaskMatrix& mask, const MomentProxies& proxies) {
  return std::sqrt(2.0) * mask_one_to_two_norm(mask) * proxies.nu4 * proxies.mu4;
}

/// Plug-in moment proxies. nu4 and K are maxima over the coordinate axes and
/// `directions_per_dim * p` random unit directions drawn from `seed`, so they
/// under-estimate the supremum over the sphere.
inline MomentProxies estimate_moment_proxies(const Dataset& data, std::uint64_t seed = 0,
                                             int directions_per_dim = 50) {
  const Index n = data.size();
  const Index p = data.dim();
  if (n < 2) throw InsufficientData("estimate_moment_proxies: need at least 2 samples");
  const Vector mean = data.samples().rowwise().mean();
  const Matrix centered = data.samples().colwise() - mean;

  MomentProxies out;
  bool any_variance = false;
  auto probe = [&](const Eigen::Ref<const Vector>& proj, bool coordinate) {
    const double m2 = proj.squaredNorm() / static_cast<double>(n);
    const double m4 = proj.array().pow(4).sum() / static_cast<double>(n);
    const double root4 = std::pow(m4, 0.25);
    out.nu4 = std::max(out.nu4, root4);
    if (coordinate) out.mu4 = std::max(out.mu4, root4);
    if (m2 > 0.0) {
      any_variance = true;
      const double kurt = m4 / (m2 * m2);
      out.kurtosis_K = std::max(out.kurtosis_K, kurt);
      if (coordinate) out.kurtosis_Kprime = std::max(out.kurtosis_Kprime, kurt);
    }
  };
  for (Index j = 0; j < p; ++j) probe(centered.row(j).transpose(), true);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  Vector dir(p);
  const Index count = static_cast<Index>(directions_per_dim) * p;
  for (Index r = 0; r < count; ++r) {
    for (Index j = 0; j < p; ++j) dir(j) = normal(gen);
    const double len = dir.norm();
    if (len == 0.0) continue;
    dir /= len;
    probe(centered.transpose() * dir, false);
  }
  if (!any_variance) throw InsufficientData("estimate_moment_proxies: data has zero variance");
  return out;
}

/// sum_j max(lambda_j - tau/2, 0) v_j v_j^T. Equivalently the minimizer of
/// ||S - A||_F^2 + tau ||S||_1 over symmetric S.
inline SymMatrix threshold_eigs(const SymMatrix& sigma_hat, double tau) {
  if (!(tau >= 0.0)) throw ParamError("threshold_eigs: tau must be nonnegative");
  return apply_spectral(sigma_hat, [tau](double x) { return std::max(x - tau / 2.0, 0.0); });
}

/// ||S - Sigma||_F^2 + ((1 + sqrt 2)^2 / 8) tau^2 rank(S).
inline double frobenius_oracle_rhs(const SymMatrix& s, const SymMatrix& sigma, double tau) {
  if (s.dim() != sigma.dim()) throw DimError("frobenius_oracle_rhs: dimension mismatch");
  const double c = (1.0 + std::sqrt(2.0)) * (1.0 + std::sqrt(2.0)) / 8.0;
  return (s - sigma).matrix().squaredNorm() + c * tau * tau * static_cast<double>(numerical_rank(s));
}

}  // namespace robust_ustat
