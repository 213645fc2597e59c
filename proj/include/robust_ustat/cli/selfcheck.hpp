#pragma once

// Embedded invariant suite run by `selfcheck`.

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "robust_ustat/covariance.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/synth.hpp"
#include "robust_ustat/ustat.hpp"

namespace robust_ustat::cli {

struct SelfcheckOptions {
  /// Name of a check whose inputs are deliberately corrupted (testing aid).
  std::string inject_fault;
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Matrix random_symmetric(std::mt19937_64& gen, Index d, double scale) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix a(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) a(i, j) = normal(gen);
  }
  return 0.5 * (a + a.transpose());
}

inline CheckResult check_psi_sandwich(bool fault) {
  // Table of psi on 10^4 points of [-5, 5].
  constexpr int kPoints = 10000;
  std::vector<double> xs(kPoints);
  std::vector<double> table(kPoints);
  for (int i = 0; i < kPoints; ++i) {
    xs[static_cast<std::size_t>(i)] = -5.0 + 10.0 * i / (kPoints - 1);
    table[static_cast<std::size_t>(i)] = psi(xs[static_cast<std::size_t>(i)]);
  }
  if (fault) table[kPoints / 2 + 1000] += 5.0;
  for (int i = 0; i < kPoints; ++i) {
    const double x = xs[static_cast<std::size_t>(i)];
    const double v = table[static_cast<std::size_t>(i)];
    const double lo = -std::log(1.0 - x + x * x);
    const double hi = std::log(1.0 + x + x * x);
    if (!(lo <= v && v <= hi)) {
      return {"psi-sandwich", false, "violated at x=" + std::to_string(x)};
    }
  }
  return {"psi-sandwich", true, std::to_string(kPoints) + " grid points"};
}

inline CheckResult check_psi_lipschitz(bool fault) {
  std::mt19937_64 gen(20240611);
  std::uniform_int_distribution<int> dim(2, 8);
  for (int trial = 0; trial < 200; ++trial) {
    const Index d = dim(gen);
    const SymMatrix a = SymMatrix::symmetrize(random_symmetric(gen, d, 1.5));
    const SymMatrix b = SymMatrix::symmetrize(random_symmetric(gen, d, 1.5));
    SymMatrix pa = psi_mat(a);
    if (fault) pa = pa * 3.0;
    const SymMatrix pb = psi_mat(b);
    const double op_gap = op_norm(pa - pb) - op_norm(a - b);
    const double fr_gap = frob_norm(pa - pb) - frob_norm(a - b);
    if (op_gap > 1e-9 || fr_gap > 1e-9) {
      return {"psi-lipschitz", false, "trial " + std::to_string(trial) + " exceeds constant 1"};
    }
  }
  return {"psi-lipschitz", true, "200 random pairs"};
}

inline CheckResult check_dilation_isometry(bool fault) {
  std::mt19937_64 gen(77);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> dim(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix a(dim(gen), dim(gen));
    for (Index i = 0; i < a.rows(); ++i) {
      for (Index j = 0; j < a.cols(); ++j) a(i, j) = normal(gen);
    }
    const RectMatrix r(a);
    double dn = op_norm(dilation(r));
    if (fault) dn *= 1.01;
    const double an = op_norm(r);
    if (std::abs(dn - an) > 1e-10 * std::max(1.0, an)) {
      return {"dilation-isometry", false, "trial " + std::to_string(trial)};
    }
  }
  return {"dilation-isometry", true, "100 random matrices"};
}

inline CheckResult check_ustat_identity(bool fault) {
  DistributionSpec spec;
  spec.covariance = build_covariance(ToeplitzModel{4, 0.4});
  spec.family = StudentT{6.0};
  spec.seed = 5;
  const Dataset data = sample(spec, 40);
  SymMatrix u = u_statistic(data, pairwise_kernel(data.dim()));
  if (fault) u = u * (1.0 + 1e-6);
  const double gap = op_norm(u - sample_covariance(data));
  if (gap > 1e-10 * std::max(1.0, op_norm(u))) {
    return {"ustat-identity", false, "gap " + std::to_string(gap)};
  }
  return {"ustat-identity", true, "pairwise kernel equals sample covariance"};
}

}  // namespace detail

inline std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opts = {}) {
  const std::vector<std::pair<std::string, std::function<CheckResult(bool)>>> checks = {
      {"psi-sandwich", detail::check_psi_sandwich},
      {"psi-lipschitz", detail::check_psi_lipschitz},
      {"dilation-isometry", detail::check_dilation_isometry},
      {"ustat-identity", detail::check_ustat_identity},
  };
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : checks) out.push_back(fn(opts.inject_fault == name));
  return out;
}

/// Prints one line per check; returns 0 iff all pass.
inline int cmd_selfcheck(std::ostream& os, const SelfcheckOptions& opts = {}) {
  bool ok = true;
  for (const auto& r : run_selfcheck(opts)) {
    os << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace robust_ustat::cli
