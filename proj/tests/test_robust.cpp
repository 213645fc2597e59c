#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "robust_ustat/covariance.hpp"
#include "robust_ustat/robust.hpp"
#include "robust_ustat/synth.hpp"

using namespace robust_ustat;

namespace {

Dataset make_data(std::uint64_t seed, Index p, Index n, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  return Dataset(oracle::random_matrix(gen, p, n, scale));
}

/// Scalar kernel whose value on the pair {i, j} is table[i + j - 1]; the
/// samples are the indices 0..n-1 stored as doubles (n = 3 covers every pair).
KernelSpec table_kernel(std::vector<double> table) {
  return KernelSpec(2, 1, [table](const TupleView& t) -> Matrix {
    const auto s = static_cast<std::size_t>(std::lround(t[0](0) + t[1](0)));
    return Matrix::Constant(1, 1, table[s - 1]);
  });
}

Dataset index_data(Index n) {
  Matrix x(1, n);
  for (Index i = 0; i < n; ++i) x(0, i) = static_cast<double>(i);
  return Dataset(x);
}

/// Pairwise kernel without the rank-one factor, so solves take the generic path.
KernelSpec generic_pairwise(Index d) {
  return KernelSpec(2, d, [](const TupleView& t) -> Matrix {
    const Vector v = t[0] - t[1];
    return 0.5 * v * v.transpose();
  });
}

oracle::Kernel pairwise_oracle() {
  return [](const std::vector<oracle::Vec>& x) -> oracle::Mat {
    const oracle::Vec v = x[0] - x[1];
    return 0.5 * v * v.transpose();
  };
}

/// Rank-one kernel with a sign that depends on the tuple, plus a full-rank
/// twin; exercises the mixed fast/generic path.
KernelSpec signed_rank_one(Index d) {
  auto sign = [](const TupleView& t) { return (t[0](0) + t[1](0)) > 0.0 ? 1.0 : -0.7; };
  return KernelSpec(
      2, d,
      [sign](const TupleView& t) -> Matrix {
        const Vector v = t[0] - t[1];
        return sign(t) * v * v.transpose();
      },
      [sign](const TupleView& t, Vector& v) {
        v = t[0] - t[1];
        return sign(t);
      });
}

SymMatrix random_sym(std::mt19937_64& gen, Index d, double scale) {
  return SymMatrix(oracle::random_symmetric(gen, d, scale));
}

}  // namespace

TEST(ThetaFromSigma, Examples) {
  EXPECT_NEAR(theta_from_sigma(2, 2, 100).theta, 0.1, 1e-15);
  EXPECT_NEAR(theta_from_sigma(1, 0.5, 1).theta, 1.0, 1e-15);
  const double a = theta_from_sigma(3, 1.7, 40).theta;
  const double b = theta_from_sigma(6, 1.7, 40).theta;
  EXPECT_NEAR(b, a / 2.0, 1e-15);
  const RobustParams p = theta_from_sigma(1.3, 2.2, 17);
  EXPECT_NEAR(p.theta, std::sqrt(2.0 * 2.2 / 17.0) / 1.3, 1e-12);
  EXPECT_EQ(*p.k, 17);
}

TEST(ThetaFromSigma, RejectsNonpositive) {
  EXPECT_THROW(theta_from_sigma(0, 1, 1), ParamError);
  EXPECT_THROW(theta_from_sigma(1, -1, 1), ParamError);
  EXPECT_THROW(theta_from_sigma(1, 1, 0), ParamError);
  EXPECT_THROW(RobustParams::from_theta(0.0), ParamError);
}

TEST(Objective, Examples) {
  const Dataset two = make_data(1, 3, 2);
  const KernelSpec k = pairwise_kernel(3);
  const std::array<Index, 2> ab = {0, 1};
  const SymMatrix h0 = k(TupleView(two.samples(), ab));
  EXPECT_NEAR(objective(two, k, h0, RobustParams::from_theta(0.7)), 0.0, 1e-15);

  Matrix x(1, 2);
  x << 0.0, std::sqrt(2.0);  // H0 = (x - y)^2 / 2 = 1
  EXPECT_NEAR(objective(Dataset(x), pairwise_kernel(1), SymMatrix::zeros(1), RobustParams::from_theta(1.0)),
              1.0 / 3.0, 1e-15);
}

TEST(Objective, SolverResultIsMinimal) {
  const Dataset data = make_data(3, 3, 15);
  const KernelSpec k = pairwise_kernel(3);
  const RobustParams p = RobustParams::from_theta(0.8);
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const SolveReport rep = solve(data, k, p, opts);
  ASSERT_TRUE(rep.converged);
  const double best = objective(data, k, rep.estimate, p);
  std::mt19937_64 gen(4);
  for (int i = 0; i < 100; ++i) {
    const SymMatrix u = rep.estimate + random_sym(gen, 3, i < 50 ? 0.05 : 2.0);
    EXPECT_GE(objective(data, k, u, p), best - 1e-14);
  }
}

TEST(Objective, AgreesWithBruteForce) {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 12; ++trial) {
    const Index d = 1 + trial % 4;
    const Dataset data = make_data(100 + static_cast<std::uint64_t>(trial), d, 7);
    const double theta = trial < 6 ? 0.3 : 2.5;
    const SymMatrix u = random_sym(gen, d, 1.0);
    const auto [obj, grad] = oracle::objective_and_gradient(data.samples(), 2, pairwise_oracle(), u.matrix(), theta);
    for (bool fast : {true, false}) {
      const Evaluation ev = RobustObjective(data, pairwise_kernel(d), theta).evaluate(u, fast);
      EXPECT_NEAR(ev.objective, obj, 1e-10 * std::max(1.0, std::abs(obj)));
      EXPECT_LT((ev.gradient.matrix() - grad).norm(), 1e-10 * std::max(1.0, grad.norm()));
    }
  }
}

TEST(Objective, DimensionMismatch) {
  const Dataset data = make_data(3, 3, 5);
  EXPECT_THROW(objective(data, pairwise_kernel(3), SymMatrix::zeros(2), RobustParams::from_theta(1)), DimError);
  EXPECT_THROW(gradient(data, pairwise_kernel(3), SymMatrix::zeros(4), RobustParams::from_theta(1)), DimError);
  EXPECT_THROW(gradient(data, pairwise_kernel(2), SymMatrix::zeros(2), RobustParams::from_theta(1)), DimError);
}

TEST(FastPath, MatchesGenericEvaluation) {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 60; ++trial) {
    const Index d = 1 + trial % 6;
    const Dataset data = make_data(500 + static_cast<std::uint64_t>(trial), d, 9 + trial % 5);
    const double theta = std::vector<double>{0.05, 0.4, 1.5, 6.0}[static_cast<std::size_t>(trial % 4)];
    // PSD U (fast path eligible when theta * lambda_max <= 1), indefinite U,
    // and U with a large eigenvalue (fallback).
    SymMatrix u;
    const Matrix g = oracle::random_matrix(gen, d, d, 0.5);
    switch (trial % 3) {
      case 0: u = SymMatrix::symmetrize(g * g.transpose()); break;
      case 1: u = random_sym(gen, d, 1.0); break;
      default: u = SymMatrix::symmetrize(g * g.transpose() * 40.0); break;
    }
    for (const KernelSpec& k : {pairwise_kernel(d), signed_rank_one(d)}) {
      const RobustObjective obj(data, k, theta);
      const Evaluation fast = obj.evaluate(u, true);
      const Evaluation slow = obj.evaluate(u, false);
      EXPECT_NEAR(fast.objective, slow.objective, 1e-12 * std::max(1.0, std::abs(slow.objective)));
      EXPECT_LT((fast.gradient - slow.gradient).matrix().norm(), 1e-12 * std::max(1.0, slow.gradient.matrix().norm()));
    }
  }
}

TEST(FastPath, SolvesAgreeWithGenericPath) {
  DistributionSpec spec;
  spec.covariance = build_covariance(ToeplitzModel{4, 0.5});
  spec.family = StudentT{4.5};
  spec.seed = 8;
  const Dataset data = sample(spec, 60);
  const RobustParams p = theta_from_sigma(3.0, 1.0, 30);
  SolverOptions fast, slow;
  fast.grad_tol = slow.grad_tol = 1e-12;
  slow.allow_fast_path = false;
  const SolveReport a = solve(data, pairwise_kernel(4), p, fast);
  const SolveReport b = solve(data, pairwise_kernel(4), p, slow);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_LT((a.estimate - b.estimate).matrix().norm(), 1e-10);
}

TEST(Gradient, Examples) {
  const Dataset two = make_data(2, 3, 2);
  const KernelSpec k = pairwise_kernel(3);
  const std::array<Index, 2> ab = {0, 1};
  const SymMatrix h0 = k(TupleView(two.samples(), ab));
  EXPECT_LT(gradient(two, k, h0, RobustParams::from_theta(1.3)).matrix().norm(), 1e-15);

  // kernel values {c - 0.3, c + 0.3, c} around c = 2
  const Dataset idx = index_data(3);
  const SymMatrix g = gradient(idx, table_kernel({1.7, 2.3, 2.0}), SymMatrix::identity(1) * 2.0,
                               RobustParams::from_theta(1.0));
  EXPECT_NEAR(g(0, 0), 0.0, 1e-15);
}

TEST(Gradient, MatchesCentralDifferences) {
  std::mt19937_64 gen(41);
  for (int trial = 0; trial < 20; ++trial) {
    const Index d = 1 + trial % 5;
    const Dataset data = make_data(900 + static_cast<std::uint64_t>(trial), d, 6 + trial % 7);
    const RobustParams p = RobustParams::from_theta(trial % 2 == 0 ? 0.5 : 2.0);
    const KernelSpec k = pairwise_kernel(d);
    const SymMatrix u = random_sym(gen, d, 1.0);
    const SymMatrix g = gradient(data, k, u, p);
    const double h = 1e-5;
    for (Index i = 0; i < d; ++i) {
      for (Index j = i; j < d; ++j) {
        Matrix e = Matrix::Zero(d, d);
        e(i, j) = e(j, i) = 1.0;
        const double fd = (objective(data, k, u + SymMatrix(e * h), p) - objective(data, k, u - SymMatrix(e * h), p)) / (2 * h);
        const double analytic = (g.matrix().cwiseProduct(e)).sum();
        EXPECT_NEAR(fd, analytic, 1e-6 * std::max(1.0, std::abs(analytic)));
      }
    }
  }
}

TEST(Gradient, LipschitzInFrobeniusNorm) {
  const Dataset data = make_data(5, 3, 10, 1.5);
  const KernelSpec k = pairwise_kernel(3);
  std::mt19937_64 gen(51);
  for (int i = 0; i < 500; ++i) {
    const RobustParams p = RobustParams::from_theta(i % 2 == 0 ? 0.3 : 3.0);
    const SymMatrix a = random_sym(gen, 3, 2.0);
    const SymMatrix b = random_sym(gen, 3, i % 3 == 0 ? 0.01 : 2.0);
    const double lhs = frob_norm(gradient(data, k, a, p) - gradient(data, k, b, p));
    EXPECT_LE(lhs, frob_norm(a - b) + 1e-9);
  }
}

TEST(Solve, SingleKernelValue) {
  const Dataset two = make_data(12, 3, 2);
  const KernelSpec k = pairwise_kernel(3);
  const std::array<Index, 2> ab = {0, 1};
  const SymMatrix h0 = k(TupleView(two.samples(), ab));
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const SolveReport rep = solve(two, k, RobustParams::from_theta(0.9), opts);
  ASSERT_TRUE(rep.converged);
  EXPECT_LT((rep.estimate - h0).matrix().norm(), 1e-10);
}

TEST(Solve, ThreeScalarKernelValues) {
  const Dataset idx = index_data(3);
  SolverOptions opts;
  opts.grad_tol = 1e-13;
  const SolveReport rep = solve(idx, table_kernel({0.0, 0.0, 10.0}), RobustParams::from_theta(1.0), opts);
  ASSERT_TRUE(rep.converged);
  const double root = oracle::bisect(
      [](double u) { return 2.0 * oracle::psi(-u) + oracle::psi(10.0 - u); }, 0.0, 1.0);
  EXPECT_NEAR(root, 1.0 - std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(rep.estimate(0, 0), root, 1e-11);
}

TEST(Solve, SymmetricScalarDataGivesCenter) {
  const Dataset idx = index_data(3);
  SolverOptions opts;
  opts.grad_tol = 1e-13;
  const SolveReport rep = solve(idx, table_kernel({4.6, 5.4, 5.0}), RobustParams::from_theta(1.2), opts);
  EXPECT_NEAR(rep.estimate(0, 0), 5.0, 1e-11);
}

TEST(Solve, FirstOrderConditionAndMonotoneTrace) {
  std::mt19937_64 gen(61);
  for (int trial = 0; trial < 25; ++trial) {
    const Index d = 1 + trial % 5;
    DistributionSpec spec;
    spec.covariance = build_covariance(ToeplitzModel{d, 0.3});
    spec.family = trial % 2 == 0 ? Family{StudentT{4.3}} : Family{Gaussian{}};
    spec.seed = 70 + static_cast<std::uint64_t>(trial);
    const Dataset data = sample(spec, 20 + trial);
    const RobustParams p = RobustParams::from_theta(std::vector<double>{0.1, 0.7, 3.0}[static_cast<std::size_t>(trial % 3)]);
    SolverOptions opts;
    opts.init = trial % 2 == 0 ? InitKind::Zero : InitKind::PlainUStat;
    const SolveReport rep = solve(data, pairwise_kernel(d), p, opts);
    ASSERT_TRUE(rep.converged);
    EXPECT_LE(rep.grad_residual, opts.grad_tol * std::max(1.0, frob_norm(rep.estimate)));
    EXPECT_DOUBLE_EQ(rep.tolerance, opts.grad_tol * std::max(1.0, frob_norm(rep.estimate)));
    const SymMatrix mp = RobustObjective(data, pairwise_kernel(d), p.theta).mean_psi(rep.estimate);
    EXPECT_LE(frob_norm(mp), p.theta * rep.tolerance * (1 + 1e-12));
    ASSERT_EQ(rep.objective_trace.size(), static_cast<std::size_t>(rep.iterations) + 1);
    for (std::size_t j = 1; j < rep.objective_trace.size(); ++j) {
      EXPECT_LE(rep.objective_trace[j], rep.objective_trace[j - 1] + 1e-12);
    }
  }
}

TEST(Solve, TranslationEquivariance) {
  const Dataset data = make_data(81, 3, 12);
  std::mt19937_64 gen(82);
  const Matrix c = oracle::random_symmetric(gen, 3, 1.0);
  const KernelSpec shifted(2, 3, [c](const TupleView& t) -> Matrix {
    const Vector v = t[0] - t[1];
    return 0.5 * v * v.transpose() + c;
  });
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const RobustParams p = RobustParams::from_theta(0.9);
  const SolveReport base = solve(data, generic_pairwise(3), p, opts);
  const SolveReport moved = solve(data, shifted, p, opts);
  EXPECT_LT((moved.estimate.matrix() - base.estimate.matrix() - c).norm(), 1e-9);
}

TEST(Solve, OrthogonalEquivariance) {
  const Dataset data = make_data(91, 4, 12);
  std::mt19937_64 gen(92);
  const Matrix q = oracle::random_orthogonal(gen, 4);
  const KernelSpec rotated(2, 4, [q](const TupleView& t) -> Matrix {
    const Vector v = q * (t[0] - t[1]);
    return 0.5 * v * v.transpose();
  });
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const RobustParams p = RobustParams::from_theta(1.1);
  const SolveReport base = solve(data, pairwise_kernel(4), p, opts);
  const SolveReport rot = solve(data, rotated, p, opts);
  EXPECT_LT((rot.estimate.matrix() - q * base.estimate.matrix() * q.transpose()).norm(), 1e-9);
}

TEST(Solve, SaturatedInstanceReportsNonConvergence) {
  const Dataset idx = index_data(3);
  SolverOptions opts;
  opts.max_iter = 5;
  const SolveReport rep = solve(idx, table_kernel({0.0, 100.0, 100.0}), RobustParams::from_theta(1.0), opts);
  EXPECT_FALSE(rep.converged);
  EXPECT_EQ(rep.iterations, 5);
  EXPECT_GT(rep.grad_residual, rep.tolerance);
}

TEST(Solve, OptionErrors) {
  const Dataset data = make_data(1, 2, 5);
  SolverOptions opts;
  opts.init = InitKind::Custom;
  opts.custom_init = SymMatrix::zeros(3);
  EXPECT_THROW(solve(data, pairwise_kernel(2), RobustParams::from_theta(1), opts), DimError);
  SolverOptions bad;
  bad.grad_tol = 0.0;
  EXPECT_THROW(solve(data, pairwise_kernel(2), RobustParams::from_theta(1), bad), ParamError);
  EXPECT_THROW(solve(make_data(1, 2, 1), pairwise_kernel(2), RobustParams::from_theta(1)), ArityError);
}

TEST(Solve, CustomInitAndIterateRecording) {
  const Dataset data = make_data(2, 2, 9);
  SolverOptions opts;
  opts.init = InitKind::Custom;
  opts.custom_init = SymMatrix::identity(2);
  opts.record_iterates = true;
  const SolveReport rep = solve(data, pairwise_kernel(2), RobustParams::from_theta(0.5), opts);
  EXPECT_EQ(rep.initial.matrix(), Matrix::Identity(2, 2));
  ASSERT_EQ(rep.iterates.size(), static_cast<std::size_t>(rep.iterations) + 1);
  EXPECT_EQ(rep.iterates.back().matrix(), rep.estimate.matrix());
}

TEST(DescentDiagnostics, Examples) {
  const Dataset data = make_data(3, 3, 14, 2.0);
  const RobustParams p = RobustParams::from_theta(0.6);
  SolverOptions opts;
  opts.grad_tol = 1e-11;
  const SolveReport rep = solve(data, pairwise_kernel(3), p, opts);
  ASSERT_TRUE(rep.converged);
  EXPECT_TRUE(descent_diagnostics(rep).holds);

  // Start at the minimizer: every gap is zero.
  SolverOptions at;
  at.init = InitKind::Custom;
  at.custom_init = rep.estimate;
  const SolveReport still = solve(data, pairwise_kernel(3), p, at);
  const DescentCheck dc = descent_diagnostics(still, rep.estimate, rep.estimate, objective(data, pairwise_kernel(3), rep.estimate, p));
  EXPECT_TRUE(dc.holds);

  // One-step trace.
  SolverOptions one;
  one.max_iter = 1;
  const SolveReport r1 = solve(data, pairwise_kernel(3), p, one);
  ASSERT_EQ(r1.objective_trace.size(), 2u);
  const double fstar = objective(data, pairwise_kernel(3), rep.estimate, p);
  EXPECT_LE(r1.objective_trace[1] - fstar, (r1.initial - rep.estimate).matrix().squaredNorm() / 2.0);
  EXPECT_TRUE(descent_diagnostics(r1, r1.initial, rep.estimate, fstar).holds);
}

TEST(DescentDiagnostics, DetectsViolation) {
  SolveReport fake;
  fake.objective_trace = {10.0, 9.0};
  const DescentCheck dc = descent_diagnostics(fake, SymMatrix::zeros(1), SymMatrix::identity(1), 0.0);
  EXPECT_FALSE(dc.holds);
  EXPECT_NEAR(dc.worst_margin, 0.5 - 9.0, 1e-15);
}

TEST(Solve, IterateContractionHoldsWithHighProbability) {
  // Sigma = diag(4, 1): E(H - EH)^2 = Sigma^2 + tr(Sigma) Sigma = diag(36, 6),
  // so sigma = 6 and r_H = 42/36. With t = 1 and k = 125 the rank condition holds.
  const SymMatrix sigma = SymMatrix::diagonal((Vector(2) << 4.0, 1.0).finished());
  const SymMatrix v(oracle::gaussian_pairwise_kernel_variance(sigma.matrix()));
  const double sigma_star = std::sqrt(op_norm(v));
  const double t = 1.0;
  const Index n = 250;
  const Index k = n / 2;
  ASSERT_TRUE(rank_condition_holds(effective_rank(v), t, k));
  const RobustParams p = theta_from_sigma(sigma_star, t, k);
  const double radius = deviation_bound(sigma_star, t, k);
  int ok = 0;
  const int reps = 100;
  for (int r = 0; r < reps; ++r) {
    DistributionSpec spec;
    spec.covariance = sigma;
    spec.seed = derive_seed(4242, static_cast<std::uint64_t>(r));
    const Dataset data = sample(spec, n);
    SolverOptions opts;
    opts.record_iterates = true;
    const SolveReport rep = solve(data, pairwise_kernel(2), p, opts);
    const double e0 = op_norm(rep.initial - sigma);
    bool all = true;
    for (std::size_t j = 0; j < rep.iterates.size(); ++j) {
      const double bound = std::pow(0.75, static_cast<double>(j)) * e0 + radius;
      all = all && op_norm(rep.iterates[j] - sigma) <= bound;
    }
    ok += all ? 1 : 0;
  }
  EXPECT_GE(ok, 95);
}

TEST(Lepski, LevelsAndConstants) {
  LepskiConfig cfg;
  cfg.sigma_min = 0.5;
  cfg.gamma = 3.0;
  cfg.t = 2.0;
  EXPECT_DOUBLE_EQ(level_sigma(cfg, 2), 4.5);
  EXPECT_DOUBLE_EQ(level_t(cfg, 1), 2.0 + std::log(2.0));
  EXPECT_DOUBLE_EQ(level_t(cfg, 3), 2.0 + std::log(12.0));
  EXPECT_THROW(level_t(cfg, 0), ParamError);
  EXPECT_NEAR(xi_bound(10.0, 1.0, 2.0), std::log(20.0), 1e-15);
  EXPECT_NEAR(xi_bound(1.0, 1.0, 2.0), std::log(2.0), 1e-15);
  EXPECT_THROW(xi_bound(0.5, 1.0, 2.0), ParamError);
}

TEST(Lepski, ConfigValidationAndRuleResolution) {
  LepskiConfig cfg;
  EXPECT_EQ(resolved_rule(cfg), Admissibility::TraceWeakened);
  cfg.rh_bound = 2.0;
  EXPECT_EQ(resolved_rule(cfg), Admissibility::EffectiveRank);
  cfg.rule = Admissibility::TraceWeakened;
  EXPECT_EQ(resolved_rule(cfg), Admissibility::TraceWeakened);

  LepskiConfig bad;
  bad.gamma = 1.0;
  EXPECT_THROW(validate(bad), ParamError);
  bad = LepskiConfig{};
  bad.sigma_min = 0.0;
  EXPECT_THROW(validate(bad), ParamError);
  bad = LepskiConfig{};
  bad.j_max = 0;
  EXPECT_THROW(validate(bad), ParamError);
}

TEST(Lepski, AdmissibleLevelsFollowTheRule) {
  LepskiConfig cfg;
  cfg.t = 1.0;
  cfg.rh_bound = 1.0;
  cfg.j_max = 20;
  // r_H t_l / k <= 1/104 with k = 1040: t_l <= 10, i.e. l(l+1) <= e^9.
  const std::vector<int> levels = admissible_levels(cfg, 1040, 1.0);
  for (int l : levels) EXPECT_LE(level_t(cfg, l), 10.0);
  EXPECT_EQ(levels.size(), 20u);
  EXPECT_TRUE(admissible_levels(cfg, 10, 1.0).empty());

  LepskiConfig tr;
  tr.sigma_min = 1.0;
  tr.t = 1.0;
  tr.rule = Admissibility::TraceWeakened;
  tr.j_max = 10;
  // tr / sigma_l^2 * t_l / k <= 1/104 gets easier as l grows.
  const std::vector<int> tl = admissible_levels(tr, 100, 50.0);
  ASSERT_FALSE(tl.empty());
  for (int l : tl) EXPECT_TRUE(trace_condition_holds(50.0, level_sigma(tr, l), level_t(tr, l), 100));
  EXPECT_EQ(tl.back(), 10);
}

TEST(Lepski, IdenticalLevelEstimatesPickTheFirstLevel) {
  const Dataset two = make_data(4, 2, 2);
  LepskiConfig cfg;
  cfg.sigma_min = 0.1;
  cfg.t = 1.0;
  cfg.rh_bound = 1e-3;
  cfg.j_max = 5;
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const LepskiResult res = lepski_select(two, pairwise_kernel(2), cfg, opts);
  ASSERT_TRUE(res.j_star.has_value());
  EXPECT_EQ(*res.j_star, res.levels.front());
  EXPECT_EQ(res.per_level.size(), res.levels.size());
  EXPECT_EQ(res.rule, Admissibility::EffectiveRank);
}

TEST(Lepski, EmptyAdmissibleSet) {
  const Dataset data = make_data(5, 2, 20);
  LepskiConfig cfg;
  cfg.sigma_min = 1.0;
  cfg.rh_bound = 50.0;
  cfg.j_max = 1;
  EXPECT_THROW(lepski_select(data, pairwise_kernel(2), cfg), AdmissibleSetEmpty);
}

TEST(Lepski, SelectionFollowsComparisonRule) {
  DistributionSpec spec;
  spec.covariance = build_covariance(SpikedModel{3, 1, 3.0, true});
  spec.family = StudentT{4.5};
  spec.seed = 17;
  const Dataset data = sample(spec, 200);
  LepskiConfig cfg;
  cfg.sigma_min = 0.2;
  cfg.t = 0.5;
  cfg.rule = Admissibility::TraceWeakened;
  cfg.j_max = 12;
  const LepskiResult res = lepski_select(data, pairwise_kernel(3), cfg);
  ASSERT_TRUE(res.j_star.has_value());
  const Index k = 100;
  // Recheck j* against the definition using the per-level estimates.
  std::optional<int> expect;
  for (std::size_t a = 0; a < res.levels.size() && !expect; ++a) {
    bool ok = true;
    for (std::size_t b = a + 1; b < res.levels.size(); ++b) {
      const int l = res.levels[b];
      ok = ok && op_norm(res.per_level[b].estimate - res.per_level[a].estimate) <=
                     46.0 * level_sigma(cfg, l) * std::sqrt(level_t(cfg, l) / static_cast<double>(k));
    }
    if (ok) expect = res.levels[a];
  }
  EXPECT_EQ(res.j_star, expect);
  // The plug-in trace bound is used when none is given.
  EXPECT_NEAR(res.admissibility_bound, plugin_kernel_variance(data, pairwise_kernel(3)).trace(), 1e-9);
}

TEST(Lepski, CacheDoesNotChangeEstimates) {
  const Dataset data = make_data(8, 3, 40);
  LepskiConfig cfg;
  cfg.sigma_min = 0.5;
  cfg.t = 0.5;
  cfg.trace_bound = 3.0;
  cfg.j_max = 6;
  const LepskiResult a = lepski_select(data, pairwise_kernel(3), cfg);
  cfg.cache_kernel_values = true;
  const LepskiResult b = lepski_select(data, pairwise_kernel(3), cfg);
  ASSERT_EQ(a.levels, b.levels);
  EXPECT_EQ(a.j_star, b.j_star);
  for (std::size_t i = 0; i < a.levels.size(); ++i) {
    EXPECT_LT((a.per_level[i].estimate - b.per_level[i].estimate).matrix().norm(), 1e-13);
  }
  const LepskiResult g = lepski_select(data, generic_pairwise(3), cfg);
  EXPECT_EQ(a.j_star, g.j_star);
}

TEST(Rectangular, SymmetricKernelMatchesSolve) {
  for (int trial = 0; trial < 5; ++trial) {
    const Index d = 2 + trial % 3;
    const Dataset data = make_data(300 + static_cast<std::uint64_t>(trial), d, 10);
    const RectKernelSpec rk(2, d, d, [](const TupleView& t) -> Matrix {
      const Vector v = t[0] - t[1];
      return 0.5 * v * v.transpose();
    });
    SolverOptions opts;
    const RobustParams p = RobustParams::from_theta(0.7);
    const RectangularEstimate re = solve_rectangular(data, rk, p, opts);
    const SolveReport sq = solve(data, pairwise_kernel(d), p, opts);
    EXPECT_TRUE(re.report.converged);
    EXPECT_LT((re.estimate.matrix() - sq.estimate.matrix()).cwiseAbs().maxCoeff(), 10 * opts.grad_tol);
  }
}

TEST(Rectangular, SingleValueAndZeroKernel) {
  const Dataset two = make_data(6, 3, 2);
  std::mt19937_64 gen(7);
  const Matrix a = oracle::random_matrix(gen, 2, 3);
  const RectKernelSpec constant(2, 2, 3, [a](const TupleView&) -> Matrix { return a; });
  SolverOptions opts;
  opts.grad_tol = 1e-12;
  const RectangularEstimate re = solve_rectangular(two, constant, RobustParams::from_theta(0.5), opts);
  EXPECT_LT((re.estimate.matrix() - a).norm(), 1e-10);

  const RectKernelSpec zero(2, 3, 1, [](const TupleView&) -> Matrix { return Matrix::Zero(3, 1); });
  const RectangularEstimate rz = solve_rectangular(make_data(1, 2, 6), zero, RobustParams::from_theta(1.0));
  EXPECT_EQ(rz.estimate.matrix(), Matrix::Zero(3, 1));
  EXPECT_EQ(rz.report.iterations, 0);
}
