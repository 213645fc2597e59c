#pragma once

// Robust (Psi-loss) modification of operator-valued U-statistics.
//
// The estimator minimizes
//
//   tr F_theta(U) = 1/theta^2 * mean over tuples of tr Psi(theta (H - U))
//
// whose gradient is -1/theta * mean of psi(theta (H - U)) and is
// 1-Lipschitz, so plain gradient descent with unit step converges.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/matrix.hpp"
#include "robust_ustat/parallel.hpp"
#include "robust_ustat/ustat.hpp"

namespace robust_ustat {

/// Constants from the deviation guarantees.
inline constexpr double kAdmissibleBound = 1.0 / 104.0;
inline constexpr double kDeviationConstant = 23.0;
inline constexpr double kLepskiConstant = 46.0;

/// Truncation scale theta together with the quantities it was derived from.
/// `t`, `k` and `sigma` are unset when theta was given directly.
struct RobustParams {
  double theta = 1.0;
  std::optional<double> t;
  std::optional<Index> k;
  std::optional<double> sigma;

  static RobustParams from_theta(double theta) {
    if (!(theta > 0.0) || !std::isfinite(theta)) {
      throw ParamError("RobustParams: theta must be positive and finite");
    }
    return RobustParams{theta, std::nullopt, std::nullopt, std::nullopt};
  }
};

/// theta = (1/sigma) sqrt(2t/k).
inline RobustParams theta_from_sigma(double sigma, double t, Index k) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ParamError("theta_from_sigma: sigma must be positive");
  if (!(t > 0.0) || !std::isfinite(t)) throw ParamError("theta_from_sigma: t must be positive");
  if (k < 1) throw ParamError("theta_from_sigma: k must be >= 1");
  return RobustParams{std::sqrt(2.0 * t / static_cast<double>(k)) / sigma, t, k, sigma};
}

/// Deviation bound 23 sigma sqrt(t/k) that holds with probability at least
/// 1 - (4d+1) e^{-t} under the admissibility condition.
inline double deviation_bound(double sigma, double t, Index k) {
  return kDeviationConstant * sigma * std::sqrt(t / static_cast<double>(k));
}

/// r_H t / k <= 1/104.
inline bool rank_condition_holds(double r_h, double t, Index k) {
  return r_h * t / static_cast<double>(k) <= kAdmissibleBound;
}

/// Weaker form tr(E(H-EH)^2) / sigma^2 * t / k <= 1/104.
inline bool trace_condition_holds(double trace_v, double sigma, double t, Index k) {
  return trace_v / (sigma * sigma) * t / static_cast<double>(k) <= kAdmissibleBound;
}

enum class InitKind { Zero, PlainUStat, Custom };

struct SolverOptions {
  int max_iter = 500;
  /// Stop once ||grad||_F <= grad_tol * max(1, ||U||_F).
  double grad_tol = 1e-8;
  InitKind init = InitKind::Zero;
  SymMatrix custom_init;
  /// Keep every iterate U^(0..J) in the report.
  bool record_iterates = false;
  /// Allow the exact rank-one evaluation path when the kernel provides it.
  bool allow_fast_path = true;
};

struct SolveReport {
  SymMatrix estimate;
  SymMatrix initial;
  int iterations = 0;
  /// ||grad tr F_theta(estimate)||_F.
  double grad_residual = 0.0;
  /// Absolute threshold the residual was compared against.
  double tolerance = 0.0;
  /// tr F_theta(U^(j)) for j = 0..iterations.
  std::vector<double> objective_trace;
  bool converged = false;
  double theta = 0.0;
  std::vector<SymMatrix> iterates;
};

struct Evaluation {
  double objective = 0.0;
  SymMatrix gradient;
};

namespace detail {

/// On the rank-one path the polynomial terms grow like mu^3 and cancel against
/// the top-eigenpair correction; tuples whose top eigenvalue can exceed this
/// cap are evaluated directly.
inline constexpr double kTopEigenCap = 16.0;

/// Largest root of 1 = rho * sum_a z_a^2 / (mu - d_a) on (lo, hi].
/// The left side decreases on (max d, inf); at hi the sum is <= 1.
inline double secular_top_root(const Vector& dvals, const Vector& z2, double rho, double lo, double hi) {
  auto eval = [&](double mu, double& g, double& dg) {
    g = 0.0;
    dg = 0.0;
    for (Index a = 0; a < dvals.size(); ++a) {
      const double inv = 1.0 / (mu - dvals(a));
      const double term = z2(a) * inv;
      g += term;
      dg -= term * inv;
    }
    g *= rho;
    dg *= rho;
  };
  double x = hi;
  for (int it = 0; it < 100; ++it) {
    double g = 0.0;
    double dg = 0.0;
    eval(x, g, dg);
    // Newton on r(mu) = 1/g - 1, which is close to linear in mu.
    const double r = 1.0 / g - 1.0;
    if (r == 0.0) return x;
    if (r < 0.0) {
      lo = std::max(lo, x);
    } else {
      hi = std::min(hi, x);
    }
    const double dr = -dg / (g * g);
    double next = x - r / dr;
    if (!(next > lo && next < hi) || !std::isfinite(next)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(x) ||
        hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(hi)) {
      return next;
    }
    x = next;
  }
  return x;
}

/// Symmetric matrix from one whose lower triangle holds the data.
inline Matrix from_lower(const Matrix& lower) {
  Matrix out = lower.triangularView<Eigen::Lower>();
  out.triangularView<Eigen::StrictlyUpper>() = lower.transpose().triangularView<Eigen::StrictlyUpper>();
  return out;
}

struct GenericScratch {
  explicit GenericScratch(Index d) : solver(d), a(d, d), fv(d), tmp(d, d) {}
  Eigen::SelfAdjointEigenSolver<Matrix> solver;
  Matrix a;
  Vector fv;
  Matrix tmp;
};

/// Adds psi(A) into acc and returns tr Psi(A).
inline double accumulate_generic(GenericScratch& s, Matrix& acc) {
  s.solver.compute(s.a, Eigen::ComputeEigenvectors);
  const Vector& ev = s.solver.eigenvalues();
  double tr_psi = 0.0;
  for (Index k = 0; k < ev.size(); ++k) {
    s.fv(k) = psi(ev(k));
    tr_psi += Psi(ev(k));
  }
  const Matrix& v = s.solver.eigenvectors();
  s.tmp.noalias() = v * s.fv.asDiagonal();
  acc.noalias() += s.tmp * v.transpose();
  return tr_psi;
}

}  // namespace detail

/// tr F_theta and its gradient for fixed data, kernel and theta.
class RobustObjective {
 public:
  RobustObjective(const Dataset& data, const KernelSpec& kernel, double theta,
                  const KernelCache* cache = nullptr)
      : data_(&data), kernel_(&kernel), theta_(theta), cache_(cache),
        chunks_(detail::combination_chunks(data.size(), kernel.arity())),
        count_(count_combinations(data.size(), kernel.arity())) {
    if (!(theta > 0.0) || !std::isfinite(theta)) throw ParamError("RobustObjective: theta must be positive");
    if (cache_ != nullptr &&
        (cache_->sample_size() != data.size() || cache_->arity() != kernel.arity() ||
         cache_->dim() != kernel.dim() || cache_->rank_one() != kernel.has_rank_one())) {
      throw DimError("RobustObjective: kernel cache does not match data and kernel");
    }
  }

  double theta() const { return theta_; }
  Index dim() const { return kernel_->dim(); }

  Evaluation evaluate(const SymMatrix& u, bool allow_fast_path = true) const {
    if (u.dim() != dim()) {
      throw DimError("RobustObjective: U has dimension " + std::to_string(u.dim()) + ", kernel " +
                     std::to_string(dim()));
    }
    if (allow_fast_path && kernel_->has_rank_one()) {
      if (auto fast = evaluate_rank_one(u)) return *std::move(fast);
    }
    return evaluate_generic(u);
  }

  /// Mean of psi(theta (H - U)); zero exactly at a minimizer.
  SymMatrix mean_psi(const SymMatrix& u) const { return evaluate(u).gradient * (-theta_); }

 private:
  template <class Fn>
  void for_each_value(std::size_t chunk, Fn&& fn) const {
    const auto& ch = chunks_[chunk];
    if (cache_ != nullptr) {
      const Index d = dim();
      for (std::size_t pos = ch.offset; pos < ch.offset + ch.count; ++pos) {
        if (cache_->rank_one()) {
          fn(nullptr, cache_->value(pos), cache_->scale(pos));
        } else {
          const Eigen::Map<const Matrix> h(cache_->value(pos).data(), d, d);
          const Matrix hm = h;
          fn(&hm, Vector(), 0.0);
        }
      }
      return;
    }
    Vector v(dim());
    detail::for_each_combination(data_->size(), kernel_->arity(), ch, [&](std::span<const Index> idx) {
      const TupleView x(data_->samples(), idx);
      if (kernel_->has_rank_one()) {
        const double s = kernel_->rank_one(x, v);
        fn(nullptr, v, s);
      } else {
        const Matrix h = kernel_->evaluate(x);
        fn(&h, Vector(), 0.0);
      }
    });
  }

  Evaluation finish(const std::vector<double>& obj, const std::vector<Matrix>& mats,
                    const Matrix* rotate) const {
    KahanSum o;
    for (double x : obj) o.add(x);
    KahanMatrixSum g(dim(), dim());
    for (const auto& m : mats) g.add(m);
    Matrix mean_psi = g.sum() / count_;
    if (rotate != nullptr) mean_psi = (*rotate) * mean_psi * rotate->transpose();
    Evaluation out;
    out.objective = o.sum() / count_ / (theta_ * theta_);
    out.gradient = SymMatrix::symmetrize(mean_psi * (-1.0 / theta_));
    return out;
  }

  Evaluation evaluate_generic(const SymMatrix& u) const {
    const Index d = dim();
    std::vector<double> obj(chunks_.size(), 0.0);
    std::vector<Matrix> acc(chunks_.size());
    parallel_for_chunks(chunks_.size(), [&](std::size_t c) {
      detail::GenericScratch s(d);
      detail::BlockedMatrixSum sum(d, d);
      KahanSum tr;
      for_each_value(c, [&](const Matrix* h, const auto& v, double scale) {
        if (h != nullptr) {
          s.a = theta_ * (*h - u.matrix());
        } else {
          s.a = theta_ * (scale * v * v.transpose() - u.matrix());
        }
        tr.add(detail::accumulate_generic(s, sum.block()));
        sum.tick();
      });
      obj[c] = tr.sum();
      acc[c] = sum.sum();
    });
    return finish(obj, acc, nullptr);
  }

  // Rank-one kernels H = s v v^T. In the eigenbasis Q of U,
  //   theta (H - U) = Q B Q^T,  B = D + rho z z^T,
  // with D = -theta Lambda(U), rho = theta s, z = Q^T v. When every
  // D entry lies in [-1, 0], all eigenvalues of B but the largest lie in
  // [-1, 0], where psi(x) = x + x^2/2 and Psi(x) = x^2/2 + x^3/6 are
  // polynomials. So psi(B) = B + B^2/2 plus a rank-one correction for the top
  // eigenpair, and tr Psi(B) = tr(B^2)/2 + tr(B^3)/6 plus a scalar one.
  std::optional<Evaluation> evaluate_rank_one(const SymMatrix& u) const {
    const Index d = dim();
    const EigenDecomp eu = eigh(u);
    const Vector dv = -theta_ * eu.eigenvalues;  // descending
    // Positive entries up to this size only perturb results by O(eps^2).
    constexpr double kPositiveSlack = 1e-9;
    if (d > 0 && (dv.minCoeff() < -1.0 || dv.maxCoeff() > kPositiveSlack)) return std::nullopt;
    const Matrix& q = eu.eigenvectors;
    const double d_max = dv.maxCoeff();
    const Vector d2 = dv.cwiseProduct(dv);
    const double theta = theta_;
    const auto direct = [d_max, theta](const Matrix* h, const auto& v, double scale) {
      return h != nullptr || scale < 0.0 || std::max(d_max, 0.0) + theta * scale * v.squaredNorm() > detail::kTopEigenCap;
    };

    std::vector<double> obj(chunks_.size(), 0.0);
    std::vector<Matrix> quad(chunks_.size());
    std::vector<Matrix> lin(chunks_.size());
    std::vector<char> generic_needed(chunks_.size(), 0);
    std::vector<Matrix> generic_acc(chunks_.size());

    parallel_for_chunks(chunks_.size(), [&](std::size_t c) {
      detail::BlockedMatrixSum t_sum(d, d);  // sum rho(1 + rho|z|^2/2) z z^T + corrections
      detail::BlockedMatrixSum s_sum(d, d);  // sum rho z z^T
      KahanSum tr;
      Vector z(d);
      Vector z2(d);
      Vector y(d);
      std::optional<detail::GenericScratch> gs;
      std::optional<detail::BlockedMatrixSum> g_sum;
      for_each_value(c, [&](const Matrix* h, const auto& v, double scale) {
        if (direct(h, v, scale)) {
          // Not a PSD rank-one value, or a saturated one: evaluate directly.
          if (!gs) {
            gs.emplace(d);
            g_sum.emplace(d, d);
          }
          gs->a = theta_ * ((h != nullptr ? *h : Matrix(scale * v * v.transpose())) - u.matrix());
          tr.add(detail::accumulate_generic(*gs, g_sum->block()));
          g_sum->tick();
          return;
        }
        const double rho = theta_ * scale;
        z.noalias() = q.transpose() * v;
        z2 = z.cwiseAbs2();
        const double nz2 = z2.sum();
        const double a1 = dv.dot(z2);
        const double a2 = d2.dot(z2);
        // tr(B^2)/2 + tr(B^3)/6 without the z-free part (added once below).
        double tr_q = rho * a1 + 0.5 * rho * rho * nz2 * nz2 +
                      0.5 * rho * a2 + 0.5 * rho * rho * nz2 * a1 + rho * rho * rho * nz2 * nz2 * nz2 / 6.0;
        t_sum.block().selfadjointView<Eigen::Lower>().rankUpdate(z, rho * (1.0 + 0.5 * rho * nz2));
        s_sum.block().selfadjointView<Eigen::Lower>().rankUpdate(z, rho);

        const double lo = std::max(d_max, 0.0);
        const double hi = d_max + rho * nz2;
        bool positive = false;
        if (hi > lo) {
          double g0 = 0.0;
          for (Index a = 0; a < d; ++a) {
            const double den = lo - dv(a);
            if (den <= 0.0) {
              if (z2(a) > 0.0) {
                g0 = std::numeric_limits<double>::infinity();
                break;
              }
              continue;
            }
            g0 += z2(a) / den;
          }
          positive = rho * g0 > 1.0;
        }
        if (positive) {
          const double mu = detail::secular_top_root(dv, z2, rho, lo, hi);
          for (Index a = 0; a < d; ++a) y(a) = z(a) / (mu - dv(a));
          y.normalize();
          double w_psi = 0.0;
          double w_Psi = 0.0;
          if (mu <= 1.0) {
            w_psi = -mu * mu;
            w_Psi = -mu * mu * mu / 3.0;
          } else {
            w_psi = 0.5 - mu - 0.5 * mu * mu;
            w_Psi = 1.0 / 3.0 + 0.5 * (mu - 1.0) - 0.5 * mu * mu - mu * mu * mu / 6.0;
          }
          t_sum.block().selfadjointView<Eigen::Lower>().rankUpdate(y, w_psi);
          tr_q += w_Psi;
        }
        tr.add(tr_q);
        t_sum.tick();
        s_sum.tick();
      });
      obj[c] = tr.sum();
      // sum p(B) = N diag(d + d^2/2) + T + S o W, with W_ab = (d_a + d_b)/2;
      // the diagonal term is added after the chunk combine.
      const Matrix t_full = detail::from_lower(t_sum.sum());
      const Matrix s_full = detail::from_lower(s_sum.sum());
      Matrix w(d, d);
      for (Index a = 0; a < d; ++a) {
        for (Index b = 0; b < d; ++b) w(a, b) = 0.5 * (dv(a) + dv(b));
      }
      quad[c] = t_full + s_full.cwiseProduct(w);
      if (gs) {
        generic_needed[c] = 1;
        generic_acc[c] = q.transpose() * g_sum->sum() * q;
      }
    });

    // Tuples counted on the fast path contribute the z-free constant terms.
    double fast_tuples = count_;
    for (std::size_t c = 0; c < chunks_.size(); ++c) {
      if (generic_needed[c]) {
        // count generic tuples in this chunk
        std::size_t g = 0;
        for_each_value(c, [&](const Matrix* h, const auto& v, double scale) {
          if (direct(h, v, scale)) ++g;
        });
        fast_tuples -= static_cast<double>(g);
        quad[c] += generic_acc[c];
      }
    }
    const double const_tr = d2.sum() / 2.0 + dv.cwiseProduct(d2).sum() / 6.0;
    std::vector<double> obj_all = obj;
    obj_all.push_back(fast_tuples * const_tr);
    Matrix diag_term = Matrix::Zero(d, d);
    diag_term.diagonal() = fast_tuples * (dv + 0.5 * d2);
    quad.push_back(diag_term);
    return finish(obj_all, quad, &q);
  }

  const Dataset* data_;
  const KernelSpec* kernel_;
  double theta_;
  const KernelCache* cache_;
  std::vector<detail::CombinationChunk> chunks_;
  double count_;
};

inline void check_kernel_data(const Dataset& data, const KernelSpec& kernel) {
  if (kernel.arity() > data.size()) {
    throw ArityError("kernel arity " + std::to_string(kernel.arity()) + " exceeds sample size " +
                     std::to_string(data.size()));
  }
}

/// tr F_theta(U).
inline double objective(const Dataset& data, const KernelSpec& kernel, const SymMatrix& u,
                        const RobustParams& params) {
  check_kernel_data(data, kernel);
  return RobustObjective(data, kernel, params.theta).evaluate(u).objective;
}

/// Gradient of tr F_theta at U.
inline SymMatrix gradient(const Dataset& data, const KernelSpec& kernel, const SymMatrix& u,
                          const RobustParams& params) {
  check_kernel_data(data, kernel);
  return RobustObjective(data, kernel, params.theta).evaluate(u).gradient;
}

/// Gradient descent with unit step from the configured starting point.
inline SolveReport solve(const Dataset& data, const KernelSpec& kernel, const RobustParams& params,
                         const SolverOptions& opts = {}, const KernelCache* cache = nullptr) {
  check_kernel_data(data, kernel);
  if (opts.max_iter < 0) throw ParamError("solve: max_iter must be nonnegative");
  if (!(opts.grad_tol > 0.0)) throw ParamError("solve: grad_tol must be positive");
  const RobustObjective obj(data, kernel, params.theta, cache);
  const Index d = kernel.dim();

  SymMatrix u;
  switch (opts.init) {
    case InitKind::Zero:
      u = SymMatrix::zeros(d);
      break;
    case InitKind::PlainUStat:
      u = u_statistic(data, kernel);
      break;
    case InitKind::Custom:
      if (opts.custom_init.dim() != d) throw DimError("solve: custom init has wrong dimension");
      u = opts.custom_init;
      break;
  }

  SolveReport report;
  report.theta = params.theta;
  report.initial = u;
  if (opts.record_iterates) report.iterates.push_back(u);
  Evaluation ev = obj.evaluate(u, opts.allow_fast_path);
  report.objective_trace.push_back(ev.objective);

  auto tolerance = [&](const SymMatrix& x) { return opts.grad_tol * std::max(1.0, frob_norm(x)); };
  while (true) {
    const double res = frob_norm(ev.gradient);
    const double tol = tolerance(u);
    if (res <= tol) {
      report.converged = true;
      report.grad_residual = res;
      report.tolerance = tol;
      break;
    }
    if (report.iterations >= opts.max_iter) {
      report.grad_residual = res;
      report.tolerance = tol;
      break;
    }
    u -= ev.gradient;
    ++report.iterations;
    ev = obj.evaluate(u, opts.allow_fast_path);
    report.objective_trace.push_back(ev.objective);
    if (opts.record_iterates) report.iterates.push_back(u);
  }
  report.estimate = std::move(u);
  return report;
}

// ---------------------------------------------------------------------------
// Descent diagnostics

struct DescentCheck {
  bool holds = true;
  /// min over j of ||U0 - U*||_F^2 / (2j) - (F(U^(j)) - F(U*)).
  double worst_margin = std::numeric_limits<double>::infinity();
};

/// Checks F(U^(j)) - F(U*) <= ||U0 - U*||_F^2 / (2j) for every recorded j.
inline DescentCheck descent_diagnostics(const SolveReport& report, const SymMatrix& u0,
                                        const SymMatrix& u_star, double objective_at_star) {
  DescentCheck out;
  const double dist2 = (u0 - u_star).matrix().squaredNorm();
  const double slack = 1e-12 * std::max(1.0, std::abs(objective_at_star));
  for (std::size_t j = 1; j < report.objective_trace.size(); ++j) {
    const double gap = report.objective_trace[j] - objective_at_star;
    const double margin = dist2 / (2.0 * static_cast<double>(j)) - gap;
    out.worst_margin = std::min(out.worst_margin, margin);
    if (margin < -slack) out.holds = false;
  }
  return out;
}

/// Uses the final iterate as the minimizer proxy.
inline DescentCheck descent_diagnostics(const SolveReport& report) {
  return descent_diagnostics(report, report.initial, report.estimate, report.objective_trace.back());
}

// ---------------------------------------------------------------------------
// Adaptive selection of theta (Lepski-type)

enum class Admissibility {
  /// r_H t_l / k <= 1/104
  EffectiveRank,
  /// tr(E(H-EH)^2) / sigma_l^2 * t_l / k <= 1/104
  TraceWeakened,
};

struct LepskiConfig {
  double sigma_min = 1.0;
  double gamma = 2.0;
  double t = 1.0;
  /// Bound on r_H; estimated from the data when unset.
  std::optional<double> rh_bound;
  /// Bound on tr E(H-EH)^2 for the weakened rule; estimated when unset.
  std::optional<double> trace_bound;
  /// Unset: EffectiveRank when rh_bound is given, TraceWeakened otherwise.
  std::optional<Admissibility> rule;
  int j_max = 64;
  bool cache_kernel_values = false;
};

inline void validate(const LepskiConfig& cfg) {
  if (!(cfg.sigma_min > 0.0)) throw ParamError("LepskiConfig: sigma_min must be positive");
  if (!(cfg.gamma > 1.0)) throw ParamError("LepskiConfig: gamma must exceed 1");
  if (!(cfg.t > 0.0)) throw ParamError("LepskiConfig: t must be positive");
  if (cfg.j_max < 1) throw ParamError("LepskiConfig: j_max must be >= 1");
  if (cfg.rh_bound && !(*cfg.rh_bound > 0.0)) throw ParamError("LepskiConfig: rh_bound must be positive");
  if (cfg.trace_bound && !(*cfg.trace_bound > 0.0)) {
    throw ParamError("LepskiConfig: trace_bound must be positive");
  }
}

inline Admissibility resolved_rule(const LepskiConfig& cfg) {
  if (cfg.rule) return *cfg.rule;
  return cfg.rh_bound ? Admissibility::EffectiveRank : Admissibility::TraceWeakened;
}

/// sigma_j = sigma_min gamma^j.
inline double level_sigma(const LepskiConfig& cfg, int j) { return cfg.sigma_min * std::pow(cfg.gamma, j); }

/// t_j = t + log(j(j+1)), defined for j >= 1.
inline double level_t(const LepskiConfig& cfg, int j) {
  if (j < 1) throw ParamError("level_t: levels start at 1");
  return cfg.t + std::log(static_cast<double>(j) * static_cast<double>(j + 1));
}

/// log[(floor(log(s*/s_min)/log g) + 1)(floor(...) + 2)].
inline double xi_bound(double sigma_star_guess, double sigma_min, double gamma) {
  if (!(sigma_min > 0.0) || !(gamma > 1.0)) throw ParamError("xi_bound: need sigma_min > 0 and gamma > 1");
  if (!(sigma_star_guess >= sigma_min)) throw ParamError("xi_bound: sigma_star must be >= sigma_min");
  const double f = std::floor(std::log(sigma_star_guess / sigma_min) / std::log(gamma));
  return std::log((f + 1.0) * (f + 2.0));
}

/// Plug-in for E(H - EH)^2 centered at the plain U-statistic.
inline SymMatrix plugin_kernel_variance(const Dataset& data, const KernelSpec& kernel) {
  return kernel_second_moment(data, kernel, u_statistic(data, kernel));
}

struct LepskiResult {
  /// Empty when no admissible level passes the comparison rule.
  std::optional<int> j_star;
  SymMatrix estimate;
  std::vector<int> levels;
  std::vector<SolveReport> per_level;
  Admissibility rule = Admissibility::TraceWeakened;
  /// Bound used by the admissibility rule (r_H or the trace).
  double admissibility_bound = 0.0;
};

/// Admissible levels in [1, j_max].
inline std::vector<int> admissible_levels(const LepskiConfig& cfg, Index k, double bound) {
  std::vector<int> levels;
  for (int l = 1; l <= cfg.j_max; ++l) {
    const double tl = level_t(cfg, l);
    const bool ok = resolved_rule(cfg) == Admissibility::EffectiveRank
                        ? rank_condition_holds(bound, tl, k)
                        : trace_condition_holds(bound, level_sigma(cfg, l), tl, k);
    if (ok) levels.push_back(l);
  }
  return levels;
}

inline LepskiResult lepski_select(const Dataset& data, const KernelSpec& kernel, const LepskiConfig& cfg,
                                  const SolverOptions& opts = {}) {
  validate(cfg);
  check_kernel_data(data, kernel);
  const Index k = data.size() / kernel.arity();

  LepskiResult out;
  out.rule = resolved_rule(cfg);
  const bool by_rank = out.rule == Admissibility::EffectiveRank;
  const std::optional<double> given = by_rank ? cfg.rh_bound : cfg.trace_bound;
  if (given) {
    out.admissibility_bound = *given;
  } else {
    const SymMatrix v = plugin_kernel_variance(data, kernel);
    out.admissibility_bound = by_rank ? effective_rank(v) : v.trace();
  }
  out.levels = admissible_levels(cfg, k, out.admissibility_bound);
  if (out.levels.empty()) {
    throw AdmissibleSetEmpty("lepski_select: no level in [1, " + std::to_string(cfg.j_max) +
                             "] satisfies the admissibility condition");
  }

  std::optional<KernelCache> cache;
  if (cfg.cache_kernel_values) cache.emplace(data, kernel);
  for (int l : out.levels) {
    const RobustParams p = theta_from_sigma(level_sigma(cfg, l), level_t(cfg, l), k);
    out.per_level.push_back(solve(data, kernel, p, opts, cache ? &*cache : nullptr));
  }

  const std::size_t count = out.levels.size();
  for (std::size_t a = 0; a < count && !out.j_star; ++a) {
    bool ok = true;
    for (std::size_t b = a + 1; b < count && ok; ++b) {
      const int l = out.levels[b];
      const double radius =
          kLepskiConstant * level_sigma(cfg, l) * std::sqrt(level_t(cfg, l) / static_cast<double>(k));
      ok = op_norm(out.per_level[b].estimate - out.per_level[a].estimate) <= radius;
    }
    if (ok) {
      out.j_star = out.levels[a];
      out.estimate = out.per_level[a].estimate;
    }
  }
  if (!out.j_star) out.estimate = SymMatrix::zeros(kernel.dim());
  return out;
}

// ---------------------------------------------------------------------------
// Rectangular kernels via the Hermitian dilation

/// Permutation-symmetric map from m samples to a rows x cols matrix.
class RectKernelSpec {
 public:
  using Evaluate = std::function<Matrix(const TupleView&)>;

  RectKernelSpec(int arity, Index rows, Index cols, Evaluate evaluate)
      : arity_(arity), rows_(rows), cols_(cols), evaluate_(std::move(evaluate)) {
    if (arity < 2) throw ArityError("RectKernelSpec: arity must be >= 2");
    if (rows < 1 || cols < 1) throw DimError("RectKernelSpec: dimensions must be positive");
  }

  int arity() const { return arity_; }
  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Matrix evaluate(const TupleView& x) const { return evaluate_(x); }

  /// x -> D(H(x)).
  KernelSpec dilated() const {
    const Index r = rows_;
    const Index c = cols_;
    auto eval = evaluate_;
    return KernelSpec(arity_, r + c, [eval, r, c](const TupleView& x) {
      Matrix out = Matrix::Zero(r + c, r + c);
      const Matrix h = eval(x);
      out.topRightCorner(r, c) = h;
      out.bottomLeftCorner(c, r) = h.transpose();
      return out;
    });
  }

 private:
  int arity_;
  Index rows_;
  Index cols_;
  Evaluate evaluate_;
};

struct RectangularEstimate {
  RectMatrix estimate;
  /// Report of the solve on the dilated problem.
  SolveReport report;
};

/// Solves the dilated problem and returns the upper-right block.
inline RectangularEstimate solve_rectangular(const Dataset& data, const RectKernelSpec& kernel,
                                             const RobustParams& params, const SolverOptions& opts = {}) {
  const KernelSpec dilated = kernel.dilated();
  RectangularEstimate out;
  out.report = solve(data, dilated, params, opts);
  out.estimate = RectMatrix(out.report.estimate.matrix().topRightCorner(kernel.rows(), kernel.cols()));
  return out;
}

}  // namespace robust_ustat
