#pragma once

// estimate / compare / selfcheck.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "robust_ustat/cli/config.hpp"
#include "robust_ustat/covariance.hpp"
#include "robust_ustat/io.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/robust.hpp"
#include "robust_ustat/synth.hpp"

namespace robust_ustat::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNotConverged = 4,
};

/// Maps a library error to the documented exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParamError*>(&e) ||
      dynamic_cast<const ModelError*>(&e) || dynamic_cast<const AdmissibleSetEmpty*>(&e)) {
    return kExitConfig;
  }
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const InsufficientData*>(&e) ||
      dynamic_cast<const ArityError*>(&e) || dynamic_cast<const DimError*>(&e)) {
    return kExitData;
  }
  return kExitFailure;
}

struct RunOptions {
  bool strict = false;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

// ---------------------------------------------------------------------------
// Data and estimators

inline SymMatrix covariance_from_spec(const CovarianceSpec& spec) {
  if (const auto* e = std::get_if<ExplicitCovariance>(&spec)) {
    const auto d = static_cast<Index>(e->rows.size());
    Matrix m(d, d);
    for (Index i = 0; i < d; ++i) {
      const auto& row = e->rows[static_cast<std::size_t>(i)];
      if (static_cast<Index>(row.size()) != d) throw ModelError("covariance matrix must be square");
      for (Index j = 0; j < d; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
    }
    SymMatrix s;
    try {
      s = SymMatrix(m);
    } catch (const Error& err) {
      throw ModelError(std::string("covariance matrix: ") + err.what());
    }
    if (eigvalsh(s)(0) < -1e-10 * std::max(1.0, op_norm(s))) throw ModelError("covariance matrix is not PSD");
    return s;
  }
  return std::visit(
      [](const auto& m) -> SymMatrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ExplicitCovariance>) {
          return SymMatrix();
        } else {
          return robust_ustat::build_covariance(CovModel(m));
        }
      },
      spec);
}

inline DistributionSpec distribution_spec(const SyntheticSource& src, std::uint64_t seed) {
  DistributionSpec spec;
  spec.family = src.family;
  spec.covariance = covariance_from_spec(src.covariance);
  if (!src.mean.empty()) spec.mean = Eigen::Map<const Vector>(src.mean.data(), static_cast<Index>(src.mean.size()));
  spec.seed = seed;
  return spec;
}

struct EstimatorResult {
  SymMatrix estimate;
  /// M o Sigma for the masked estimator, Sigma otherwise; unset for CSV data.
  std::optional<SymMatrix> target;
  int iterations = 0;
  double grad_residual = 0.0;
  double tolerance = 0.0;
  bool converged = true;
  std::optional<double> theta;
  std::optional<Index> k;
  /// Extra key=value diagnostics, in insertion order.
  std::vector<std::pair<std::string, std::string>> extra;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string fmt(double x) { return io::format_double(x); }

inline void take_report(EstimatorResult& r, const SolveReport& rep, const RobustParams& params) {
  r.iterations = rep.iterations;
  r.grad_residual = rep.grad_residual;
  r.tolerance = rep.tolerance;
  r.converged = rep.converged;
  r.theta = params.theta;
  r.k = params.k;
}

inline double resolve_sigma(const SigmaSpec& s, const std::optional<SymMatrix>& population) {
  if (!s.oracle) return s.value;
  if (!population) throw ConfigError("params.sigma: \"oracle\" needs the population covariance");
  return sigma_proxy_linear(s.kurtosis, *population);
}

}  // namespace detail

/// Runs one estimator on `data`. `population` is the generating covariance
/// when known.
inline EstimatorResult run_estimator(EstimatorKind kind, const Dataset& data, const Params& params,
                                     const std::optional<SymMatrix>& population) {
  EstimatorResult r;
  r.target = population;
  const SolverOptions opts = params.solver.to_options();
  switch (kind) {
    case EstimatorKind::Sample: {
      r.estimate = sample_covariance(data);
      break;
    }
    case EstimatorKind::Robust:
    case EstimatorKind::Thresholded: {
      const double sigma = detail::resolve_sigma(*params.sigma, population);
      const CovEstimate est = robust_covariance(data, sigma, *params.t, opts, params.project_psd);
      detail::take_report(r, est.report, est.params_used);
      r.extra.emplace_back("sigma", detail::fmt(sigma));
      r.extra.emplace_back("t", detail::fmt(*params.t));
      r.estimate = est.matrix;
      if (kind == EstimatorKind::Thresholded) {
        r.estimate = threshold_eigs(est.matrix, *params.tau);
        r.extra.emplace_back("tau", detail::fmt(*params.tau));
        r.extra.emplace_back("rank", std::to_string(numerical_rank(r.estimate)));
      }
      break;
    }
    case EstimatorKind::RobustAdaptive: {
      if (data.size() < 2) throw InsufficientData("robust-adaptive: need at least 2 samples");
      const LepskiConfig cfg = params.lepski->to_config();
      const LepskiResult sel = lepski_select(data, pairwise_kernel(data.dim()), cfg, opts);
      const Index k = data.size() / 2;
      r.estimate = sel.estimate;
      r.k = k;
      r.extra.emplace_back("admissibility_rule", detail::rule_name(sel.rule));
      r.extra.emplace_back("admissibility_bound", detail::fmt(sel.admissibility_bound));
      r.extra.emplace_back("levels", std::to_string(sel.levels.size()));
      r.converged = true;
      for (const auto& rep : sel.per_level) {
        r.iterations += rep.iterations;
        r.converged = r.converged && rep.converged;
      }
      if (sel.j_star) {
        const auto pos = static_cast<std::size_t>(
            std::find(sel.levels.begin(), sel.levels.end(), *sel.j_star) - sel.levels.begin());
        const SolveReport& chosen = sel.per_level[pos];
        r.grad_residual = chosen.grad_residual;
        r.tolerance = chosen.tolerance;
        r.theta = chosen.theta;
        r.extra.emplace_back("j_star", std::to_string(*sel.j_star));
        r.extra.emplace_back("sigma", detail::fmt(level_sigma(cfg, *sel.j_star)));
      } else {
        r.extra.emplace_back("j_star", "infinite");
        r.warnings.push_back("robust-adaptive: no level passed the comparison rule; estimate is zero");
      }
      break;
    }
    case EstimatorKind::Masked: {
      const MaskMatrix mask = build_mask(*params.mask, data.dim());
      double delta = params.delta->value;
      if (params.delta->estimate) {
        const MomentProxies mp = estimate_moment_proxies(data, data.info().seed);
        delta = mask_delta_proxy(mask, mp);
        r.warnings.push_back(
            "masked: delta from plug-in moment proxies; nu4 is a maximum over probed directions and "
            "can under-estimate the supremum, making theta too large");
        r.extra.emplace_back("nu4", detail::fmt(mp.nu4));
        r.extra.emplace_back("mu4", detail::fmt(mp.mu4));
      }
      const CovEstimate est = masked_robust_covariance(data, mask, delta, *params.t, opts);
      detail::take_report(r, est.report, est.params_used);
      r.estimate = est.matrix;
      r.extra.emplace_back("delta", detail::fmt(delta));
      r.extra.emplace_back("t", detail::fmt(*params.t));
      if (population) r.target = hadamard(mask.matrix(), *population);
      break;
    }
  }
  if (!r.converged) {
    r.warnings.push_back(std::string(estimator_name(kind)) + ": solver did not converge (" +
                         std::to_string(r.iterations) + " iterations)");
  }
  return r;
}

// ---------------------------------------------------------------------------
// estimate

namespace detail {

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

}  // namespace detail

inline std::string diagnostics_text(EstimatorKind kind, const EstimatorResult& r, const DatasetInfo& info) {
  std::ostringstream os;
  os << "estimator=" << estimator_name(kind) << '\n';
  os << "iterations=" << r.iterations << '\n';
  os << "grad_residual=" << detail::fmt(r.grad_residual) << '\n';
  os << "tolerance=" << detail::fmt(r.tolerance) << '\n';
  os << "theta=" << (r.theta ? detail::fmt(*r.theta) : "na") << '\n';
  os << "k=" << (r.k ? std::to_string(*r.k) : "na") << '\n';
  os << "converged=" << (r.converged ? "true" : "false") << '\n';
  for (const auto& [key, value] : r.extra) os << key << '=' << value << '\n';
  if (info.near_critical) os << "near_critical=true\n";
  return os.str();
}

inline int cmd_estimate(const ExperimentConfig& cfg, const RunOptions& run = {}) {
  if (cfg.estimators.size() != 1) throw ConfigError("estimate: exactly one estimator must be selected");
  if (cfg.reps != 1) throw ConfigError("estimate: reps must be 1");
  const EstimatorKind kind = cfg.estimators.front();

  Dataset data;
  std::optional<SymMatrix> population;
  if (const auto* csv = std::get_if<CsvSource>(&cfg.data)) {
    data = io::read_dataset_csv(csv->path);
  } else {
    const auto& src = std::get<SyntheticSource>(cfg.data);
    const DistributionSpec spec = distribution_spec(src, src.seed);
    data = sample(spec, src.n);
    population = spec.covariance;
  }
  const EstimatorResult r = run_estimator(kind, data, cfg.params, population);
  for (const auto& w : r.warnings) *run.err << "warning: " << w << '\n';

  {
    auto out = detail::open_output(cfg.output);
    io::write_matrix_csv(out, r.estimate.matrix());
  }
  {
    auto out = detail::open_output(cfg.output + ".diag");
    out << diagnostics_text(kind, r, data.info());
  }
  if (!r.converged && run.strict) return kExitNotConverged;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// compare

struct ResultRow {
  int rep = 0;
  std::uint64_t seed = 0;
  EstimatorKind estimator = EstimatorKind::Sample;
  double error_op = 0.0;
  double error_frob = 0.0;
  int iterations = 0;
  bool converged = true;
  std::optional<double> wall_time_ms;
};

struct SummaryRow {
  EstimatorKind estimator = EstimatorKind::Sample;
  int reps = 0;
  double mean_error_op = 0.0;
  double median_error_op = 0.0;
  double q95_error_op = 0.0;
  int converged = 0;
};

/// Linear interpolation between order statistics (Hyndman-Fan type 7).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows,
                                         const std::vector<EstimatorKind>& estimators) {
  std::vector<SummaryRow> out;
  for (auto kind : estimators) {
    std::vector<double> errs;
    SummaryRow s;
    s.estimator = kind;
    for (const auto& r : rows) {
      if (r.estimator != kind) continue;
      errs.push_back(r.error_op);
      s.converged += r.converged ? 1 : 0;
    }
    s.reps = static_cast<int>(errs.size());
    KahanSum total;
    for (double e : errs) total.add(e);
    s.mean_error_op = errs.empty() ? 0.0 : total.sum() / static_cast<double>(errs.size());
    s.median_error_op = quantile(errs, 0.5);
    s.q95_error_op = quantile(errs, 0.95);
    out.push_back(s);
  }
  return out;
}

inline void write_result_rows(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << "# schema=1\n";
  os << "rep,seed,estimator,error_op,error_frob,iterations,converged,wall_time_ms\n";
  for (const auto& r : rows) {
    os << r.rep << ',' << r.seed << ',' << estimator_name(r.estimator) << ',' << io::format_double(r.error_op) << ','
       << io::format_double(r.error_frob) << ',' << r.iterations << ',' << (r.converged ? "true" : "false") << ',';
    if (r.wall_time_ms) {
      std::ostringstream t;
      t << std::fixed << std::setprecision(3) << *r.wall_time_ms;
      os << t.str();
    }
    os << '\n';
  }
}

inline void write_summary(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "# schema=1\n";
  os << "estimator,reps,mean_error_op,median_error_op,q95_error_op,converged\n";
  for (const auto& s : rows) {
    os << estimator_name(s.estimator) << ',' << s.reps << ',' << io::format_double(s.mean_error_op) << ','
       << io::format_double(s.median_error_op) << ',' << io::format_double(s.q95_error_op) << ',' << s.converged
       << '\n';
  }
}

/// Runs every selected estimator on `reps` seeded datasets. Rep r samples
/// with derive_seed(seed, r); rows come back in (rep, estimator) order.
inline std::vector<ResultRow> run_compare(const ExperimentConfig& cfg, std::vector<std::string>* warnings = nullptr) {
  const auto* src = std::get_if<SyntheticSource>(&cfg.data);
  if (src == nullptr) throw ConfigError("compare: needs a synthetic data source (population truth)");
  const std::size_t per_rep = cfg.estimators.size();
  std::vector<ResultRow> rows(static_cast<std::size_t>(cfg.reps) * per_rep);
  std::vector<std::vector<std::string>> rep_warnings(static_cast<std::size_t>(cfg.reps));
  const DistributionSpec base = distribution_spec(*src, src->seed);

  parallel_for_chunks(static_cast<std::size_t>(cfg.reps), [&](std::size_t rep) {
    DistributionSpec spec = base;
    spec.seed = derive_seed(src->seed, rep);
    const Dataset data = sample(spec, src->n);
    for (std::size_t e = 0; e < per_rep; ++e) {
      const auto start = std::chrono::steady_clock::now();
      const EstimatorResult r = run_estimator(cfg.estimators[e], data, cfg.params, spec.covariance);
      const auto stop = std::chrono::steady_clock::now();
      ResultRow& row = rows[rep * per_rep + e];
      row.rep = static_cast<int>(rep);
      row.seed = spec.seed;
      row.estimator = cfg.estimators[e];
      const SymMatrix diff = r.estimate - *r.target;
      row.error_op = op_norm(diff);
      row.error_frob = frob_norm(diff);
      row.iterations = r.iterations;
      row.converged = r.converged;
      if (cfg.record_timing) row.wall_time_ms = std::chrono::duration<double, std::milli>(stop - start).count();
      for (const auto& w : r.warnings) rep_warnings[rep].push_back(w);
    }
  });

  if (warnings != nullptr) {
    for (const auto& ws : rep_warnings) {
      for (const auto& w : ws) {
        if (std::find(warnings->begin(), warnings->end(), w) == warnings->end()) warnings->push_back(w);
      }
    }
  }
  return rows;
}

inline std::string summary_path(const std::string& output) { return output + ".summary.csv"; }

inline int cmd_compare(const ExperimentConfig& cfg, const RunOptions& run = {}) {
  if (cfg.reps < 1) throw ConfigError("compare: reps must be >= 1");
  std::vector<std::string> warnings;
  const std::vector<ResultRow> rows = run_compare(cfg, &warnings);
  for (const auto& w : warnings) *run.err << "warning: " << w << '\n';
  const std::vector<SummaryRow> summary = summarize(rows, cfg.estimators);
  {
    auto out = detail::open_output(cfg.output);
    write_result_rows(out, rows);
  }
  {
    auto out = detail::open_output(summary_path(cfg.output));
    write_summary(out, summary);
  }
  write_summary(*run.out, summary);
  const bool all_converged =
      std::all_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.converged; });
  if (!all_converged && run.strict) return kExitNotConverged;
  return kExitOk;
}

}  // namespace robust_ustat::cli
