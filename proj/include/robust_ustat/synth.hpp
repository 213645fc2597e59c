#pragma once

// Seeded synthetic data: covariance builders, heavy-tailed samplers,
// contamination and masks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <variant>

#include "robust_ustat/covariance.hpp"
#include "robust_ustat/errors.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/ustat.hpp"

namespace robust_ustat {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed of replication `rep` derived from a base seed.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t rep) {
  return splitmix64(seed ^ splitmix64(rep + 0x632BE59BD9B4E019ULL));
}

/// Counter-based generator: draw i of stream s is a hash of (seed, s, i),
/// so streams are independent of each other and of scheduling.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(splitmix64(seed ^ splitmix64(stream ^ 0xD1B54A32D192ED03ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Covariance models

struct IdentityModel {
  Index d = 1;
  bool operator==(const IdentityModel&) const = default;
};
/// spike * (first `rank` coordinate axes), plus I when identity_base is set.
struct SpikedModel {
  Index d = 1;
  Index rank = 1;
  double spike = 1.0;
  bool identity_base = true;
  bool operator==(const SpikedModel&) const = default;
};
/// rho^{|i-j|}
struct ToeplitzModel {
  Index d = 1;
  double rho = 0.0;
  bool operator==(const ToeplitzModel&) const = default;
};
/// (|i-j| + 1)^{-alpha}
struct BandedModel {
  Index d = 1;
  double alpha = 1.0;
  bool operator==(const BandedModel&) const = default;
};
using CovModel = std::variant<IdentityModel, SpikedModel, ToeplitzModel, BandedModel>;

namespace detail {

inline void check_psd(const SymMatrix& s, const char* what) {
  if (s.dim() == 0) throw ModelError(std::string(what) + ": empty matrix");
  const Vector ev = eigvalsh(s);
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev(0) < -1e-10 * scale) throw ModelError(std::string(what) + ": covariance is not PSD");
}

}  // namespace detail

inline SymMatrix build_covariance(const CovModel& model) {
  return std::visit(
      [](const auto& m) -> SymMatrix {
        using T = std::decay_t<decltype(m)>;
        if (m.d < 1) throw ModelError("build_covariance: dimension must be positive");
        Matrix s = Matrix::Zero(m.d, m.d);
        if constexpr (std::is_same_v<T, IdentityModel>) {
          s.setIdentity();
        } else if constexpr (std::is_same_v<T, SpikedModel>) {
          if (m.rank < 1 || m.rank > m.d) throw ModelError("Spiked: rank must be in [1, d]");
          if (!(m.spike > 0.0)) throw ModelError("Spiked: spike must be positive");
          if (m.identity_base) s.setIdentity();
          for (Index i = 0; i < m.rank; ++i) s(i, i) += m.spike;
        } else if constexpr (std::is_same_v<T, ToeplitzModel>) {
          if (!(std::abs(m.rho) < 1.0)) throw ModelError("Toeplitz: |rho| must be < 1");
          for (Index i = 0; i < m.d; ++i) {
            for (Index j = 0; j < m.d; ++j) s(i, j) = std::pow(m.rho, static_cast<double>(std::abs(i - j)));
          }
        } else {
          if (!(m.alpha > 0.0)) throw ModelError("Banded: alpha must be positive");
          for (Index i = 0; i < m.d; ++i) {
            for (Index j = 0; j < m.d; ++j) s(i, j) = std::pow(static_cast<double>(std::abs(i - j) + 1), -m.alpha);
          }
        }
        SymMatrix out(s);
        detail::check_psd(out, "build_covariance");
        return out;
      },
      model);
}

// ---------------------------------------------------------------------------
// Distributions

struct Gaussian {
  bool operator==(const Gaussian&) const = default;
};
/// Multivariate t, rescaled so the population covariance is the requested one.
struct StudentT {
  double dof = 5.0;
  bool operator==(const StudentT&) const = default;
};
/// Coordinates exp(scale * z), standardized, then mixed by Sigma^{1/2}.
struct LogNormal {
  double scale = 1.0;
  bool operator==(const LogNormal&) const = default;
};
/// Each sample is replaced with probability eps by outlier_scale * (random unit vector).
struct ContaminatedGaussian {
  double eps = 0.0;
  double outlier_scale = 1.0;
  bool operator==(const ContaminatedGaussian&) const = default;
};
using Family = std::variant<Gaussian, StudentT, LogNormal, ContaminatedGaussian>;

struct DistributionSpec {
  Family family = Gaussian{};
  /// Empty means zero mean.
  Vector mean;
  SymMatrix covariance;
  std::uint64_t seed = 0;
};

inline std::string family_name(const Family& f) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, Gaussian>) return "gaussian";
        else if constexpr (std::is_same_v<T, StudentT>) return "student_t";
        else if constexpr (std::is_same_v<T, LogNormal>) return "lognormal";
        else return "contaminated_gaussian";
      },
      f);
}

inline void validate(const DistributionSpec& spec) {
  detail::check_psd(spec.covariance, "DistributionSpec");
  if (spec.mean.size() != 0 && spec.mean.size() != spec.covariance.dim()) {
    throw ModelError("DistributionSpec: mean has wrong length");
  }
  std::visit(
      [](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, StudentT>) {
          if (!(f.dof > 4.0)) throw ModelError("StudentT: dof must exceed 4");
        } else if constexpr (std::is_same_v<T, LogNormal>) {
          if (!(f.scale > 0.0)) throw ModelError("LogNormal: scale must be positive");
        } else if constexpr (std::is_same_v<T, ContaminatedGaussian>) {
          if (!(f.eps >= 0.0 && f.eps < 1.0)) throw ModelError("ContaminatedGaussian: eps must be in [0, 1)");
          if (!(f.outlier_scale >= 0.0)) throw ModelError("ContaminatedGaussian: outlier_scale must be >= 0");
        }
      },
      spec.family);
}

/// n samples from `spec`. Stream 0 drives the Gaussian core, stream 1 the
/// auxiliary draws (chi-square mixing, contamination), so eps = 0
/// reproduces the Gaussian sampler exactly.
inline Dataset sample(const DistributionSpec& spec, Index n) {
  if (n < 1) throw ModelError("sample: n must be >= 1");
  validate(spec);
  const Index p = spec.covariance.dim();
  const Matrix root = apply_spectral(spec.covariance, [](double x) { return std::sqrt(std::max(x, 0.0)); }).matrix();
  const Vector mean = spec.mean.size() == 0 ? Vector::Zero(p) : spec.mean;

  CounterRng core(spec.seed, 0);
  CounterRng aux(spec.seed, 1);
  std::normal_distribution<double> normal;

  Matrix z(p, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) z(j, i) = normal(core);
  }

  DatasetInfo info;
  info.seed = spec.seed;
  info.source = family_name(spec.family);

  Matrix y(p, n);
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, Gaussian>) {
          y = root * z;
        } else if constexpr (std::is_same_v<T, StudentT>) {
          info.near_critical = f.dof <= 4.5;
          std::chi_squared_distribution<double> chi2(f.dof);
          const double shrink = std::sqrt((f.dof - 2.0) / f.dof);
          for (Index i = 0; i < n; ++i) {
            const double w = std::sqrt(chi2(aux) / f.dof);
            z.col(i) *= shrink / w;
          }
          y = root * z;
        } else if constexpr (std::is_same_v<T, LogNormal>) {
          const double s2 = f.scale * f.scale;
          const double m = std::exp(s2 / 2.0);
          const double sd = std::sqrt((std::exp(s2) - 1.0) * std::exp(s2));
          const Matrix w = ((f.scale * z).array().exp() - m) / sd;
          y = root * w;
        } else {
          y = root * z;
          std::bernoulli_distribution flip(f.eps);
          std::normal_distribution<double> aux_normal;
          Vector dir(p);
          for (Index i = 0; i < n; ++i) {
            if (!flip(aux)) continue;
            double len = 0.0;
            do {
              for (Index j = 0; j < p; ++j) dir(j) = aux_normal(aux);
              len = dir.norm();
            } while (len == 0.0);
            y.col(i) = f.outlier_scale / len * dir;
          }
        }
      },
      spec.family);
  y.colwise() += mean;
  return Dataset(std::move(y), std::move(info));
}

// ---------------------------------------------------------------------------
// Masks

struct BandedMask {
  Index b = 0;
  bool operator==(const BandedMask&) const = default;
};
struct FullMask {
  bool operator==(const FullMask&) const = default;
};
struct DiagonalMask {
  bool operator==(const DiagonalMask&) const = default;
};
using MaskKind = std::variant<BandedMask, FullMask, DiagonalMask>;

/// 0/1 mask; Banded(b) has M_ij = 1 iff |i - j| <= b.
inline MaskMatrix build_mask(const MaskKind& kind, Index d) {
  if (d < 1) throw ModelError("build_mask: dimension must be positive");
  Matrix m = Matrix::Zero(d, d);
  std::visit(
      [&](const auto& k) {
        using T = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<T, BandedMask>) {
          if (k.b < 0 || k.b >= d) throw ModelError("build_mask: band must be in [0, d)");
          for (Index i = 0; i < d; ++i) {
            for (Index j = 0; j < d; ++j) m(i, j) = std::abs(i - j) <= k.b ? 1.0 : 0.0;
          }
        } else if constexpr (std::is_same_v<T, FullMask>) {
          m.setOnes();
        } else {
          m.setIdentity();
        }
      },
      kind);
  return MaskMatrix(m);
}

}  // namespace robust_ustat
