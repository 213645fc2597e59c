#pragma once

// Experiment configuration: one JSON document, unknown keys rejected.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "robust_ustat/errors.hpp"
#include "robust_ustat/robust.hpp"
#include "robust_ustat/synth.hpp"

namespace robust_ustat::cli {

using Json = nlohmann::json;

enum class EstimatorKind { Sample, Robust, RobustAdaptive, Masked, Thresholded };

inline const char* estimator_name(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::Sample: return "sample";
    case EstimatorKind::Robust: return "robust";
    case EstimatorKind::RobustAdaptive: return "robust-adaptive";
    case EstimatorKind::Masked: return "masked";
    case EstimatorKind::Thresholded: return "thresholded";
  }
  return "?";
}

inline EstimatorKind estimator_from_name(const std::string& s) {
  for (auto k : {EstimatorKind::Sample, EstimatorKind::Robust, EstimatorKind::RobustAdaptive, EstimatorKind::Masked,
                 EstimatorKind::Thresholded}) {
    if (s == estimator_name(k)) return k;
  }
  throw ConfigError("unknown estimator '" + s +
                    "' (expected sample, robust, robust-adaptive, masked or thresholded)");
}

struct ExplicitCovariance {
  std::vector<std::vector<double>> rows;
  bool operator==(const ExplicitCovariance&) const = default;
};
using CovarianceSpec = std::variant<IdentityModel, SpikedModel, ToeplitzModel, BandedModel, ExplicitCovariance>;

struct CsvSource {
  std::string path;
  bool operator==(const CsvSource&) const = default;
};

struct SyntheticSource {
  Family family = Gaussian{};
  CovarianceSpec covariance = IdentityModel{};
  std::vector<double> mean;
  Index n = 0;
  std::uint64_t seed = 0;
  bool operator==(const SyntheticSource&) const = default;
};

using DataSource = std::variant<CsvSource, SyntheticSource>;

/// A fixed value, or sqrt(K r(Sigma)) ||Sigma|| from the population covariance.
struct SigmaSpec {
  bool oracle = false;
  double value = 0.0;
  double kurtosis = 0.0;
  bool operator==(const SigmaSpec&) const = default;
};

/// A fixed value, or the plug-in sqrt(2) ||M||_{1->2} nu4 mu4.
struct DeltaSpec {
  bool estimate = false;
  double value = 0.0;
  bool operator==(const DeltaSpec&) const = default;
};

struct LepskiParams {
  double sigma_min = 0.0;
  double gamma = 2.0;
  double t = 0.0;
  std::optional<double> rh_bound;
  std::optional<double> trace_bound;
  std::optional<Admissibility> rule;
  int j_max = 64;
  bool cache_kernel_values = false;
  bool operator==(const LepskiParams&) const = default;

  LepskiConfig to_config() const {
    LepskiConfig c;
    c.sigma_min = sigma_min;
    c.gamma = gamma;
    c.t = t;
    c.rh_bound = rh_bound;
    c.trace_bound = trace_bound;
    c.rule = rule;
    c.j_max = j_max;
    c.cache_kernel_values = cache_kernel_values;
    return c;
  }
};

struct SolverParams {
  int max_iter = 500;
  double grad_tol = 1e-8;
  InitKind init = InitKind::Zero;
  bool operator==(const SolverParams&) const = default;

  SolverOptions to_options() const {
    SolverOptions o;
    o.max_iter = max_iter;
    o.grad_tol = grad_tol;
    o.init = init;
    return o;
  }
};

struct Params {
  std::optional<SigmaSpec> sigma;
  std::optional<double> t;
  std::optional<LepskiParams> lepski;
  std::optional<DeltaSpec> delta;
  std::optional<MaskKind> mask;
  std::optional<double> tau;
  bool project_psd = false;
  SolverParams solver;
  bool operator==(const Params&) const = default;
};

struct ExperimentConfig {
  DataSource data = CsvSource{};
  std::vector<EstimatorKind> estimators;
  Params params;
  int reps = 1;
  std::string output;
  /// Fill the wall_time_ms column; off by default so reruns are byte-identical.
  bool record_timing = false;
  bool operator==(const ExperimentConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

/// Reads fields of one JSON object and rejects keys that were never read.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const Json& at(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing required key '" + key + "'");
    seen_.insert(key);
    return j_.at(key);
  }

  std::optional<std::reference_wrapper<const Json>> find(const std::string& key) {
    if (!j_.contains(key)) return std::nullopt;
    seen_.insert(key);
    return std::cref(j_.at(key));
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  double number(const std::string& key) { return as_number(at(key), path(key)); }
  std::optional<double> opt_number(const std::string& key) {
    auto v = find(key);
    if (!v) return std::nullopt;
    return as_number(v->get(), path(key));
  }
  long long integer(const std::string& key) { return as_integer(at(key), path(key)); }
  std::string string(const std::string& key) { return as_string(at(key), path(key)); }
  bool boolean(const std::string& key, bool fallback) {
    auto v = find(key);
    if (!v) return fallback;
    if (!v->get().is_boolean()) throw ConfigError(path(key) + ": expected true or false");
    return v->get().get<bool>();
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown key '" + item.key() + "'");
    }
  }

  static double as_number(const Json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
    return v.get<double>();
  }
  static long long as_integer(const Json& v, const std::string& where) {
    if (v.is_number_unsigned()) {
      const auto u = v.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(std::numeric_limits<long long>::max())) {
        throw ConfigError(where + ": integer out of range");
      }
      return static_cast<long long>(u);
    }
    if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    return v.get<long long>();
  }
  static std::string as_string(const Json& v, const std::string& where) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
    return v.get<std::string>();
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Family parse_family(const Json& j) {
  ObjectReader r(j, "data.synthetic.family");
  const std::string name = r.string("name");
  Family out;
  if (name == "gaussian") {
    out = Gaussian{};
  } else if (name == "student_t") {
    out = StudentT{r.number("dof")};
  } else if (name == "lognormal") {
    out = LogNormal{r.number("scale")};
  } else if (name == "contaminated_gaussian") {
    out = ContaminatedGaussian{r.number("eps"), r.number("outlier_scale")};
  } else {
    throw ConfigError("data.synthetic.family.name: unknown family '" + name +
                      "' (expected gaussian, student_t, lognormal or contaminated_gaussian)");
  }
  r.finish();
  return out;
}

inline CovarianceSpec parse_covariance(const Json& j) {
  ObjectReader r(j, "data.synthetic.covariance");
  CovarianceSpec out;
  if (r.has("matrix")) {
    const Json& m = r.at("matrix");
    if (!m.is_array() || m.empty()) throw ConfigError(r.path("matrix") + ": expected a nonempty array of rows");
    ExplicitCovariance c;
    for (const auto& row : m) {
      if (!row.is_array()) throw ConfigError(r.path("matrix") + ": rows must be arrays");
      std::vector<double> values;
      for (const auto& x : row) values.push_back(ObjectReader::as_number(x, r.path("matrix")));
      c.rows.push_back(std::move(values));
    }
    out = std::move(c);
    r.finish();
    return out;
  }
  const std::string model = r.string("model");
  const Index d = r.integer("d");
  if (model == "identity") {
    out = IdentityModel{d};
  } else if (model == "spiked") {
    out = SpikedModel{d, static_cast<Index>(r.integer("rank")), r.number("spike"), r.boolean("identity_base", true)};
  } else if (model == "toeplitz") {
    out = ToeplitzModel{d, r.number("rho")};
  } else if (model == "banded") {
    out = BandedModel{d, r.number("alpha")};
  } else {
    throw ConfigError("data.synthetic.covariance.model: unknown model '" + model +
                      "' (expected identity, spiked, toeplitz or banded)");
  }
  r.finish();
  return out;
}

inline DataSource parse_data(const Json& j) {
  ObjectReader r(j, "data");
  const bool csv = r.has("csv");
  const bool synthetic = r.has("synthetic");
  if (csv == synthetic) throw ConfigError("data: exactly one of 'csv' or 'synthetic' is required");
  DataSource out;
  if (csv) {
    out = CsvSource{r.string("csv")};
  } else {
    ObjectReader s(r.at("synthetic"), "data.synthetic");
    SyntheticSource src;
    src.family = parse_family(s.at("family"));
    src.covariance = parse_covariance(s.at("covariance"));
    if (auto m = s.find("mean")) {
      if (!m->get().is_array()) throw ConfigError("data.synthetic.mean: expected an array");
      for (const auto& x : m->get()) src.mean.push_back(ObjectReader::as_number(x, "data.synthetic.mean"));
    }
    src.n = s.integer("n");
    const long long seed = s.integer("seed");
    if (seed < 0) throw ConfigError("data.synthetic.seed: must be nonnegative");
    src.seed = static_cast<std::uint64_t>(seed);
    s.finish();
    if (src.n < 1) throw ConfigError("data.synthetic.n: must be >= 1");
    out = std::move(src);
  }
  r.finish();
  return out;
}

inline Admissibility parse_rule(const std::string& s) {
  if (s == "effective_rank") return Admissibility::EffectiveRank;
  if (s == "trace_weakened") return Admissibility::TraceWeakened;
  throw ConfigError("params.lepski.rule: expected effective_rank or trace_weakened, got '" + s + "'");
}

inline const char* rule_name(Admissibility a) {
  return a == Admissibility::EffectiveRank ? "effective_rank" : "trace_weakened";
}

inline LepskiParams parse_lepski(const Json& j) {
  ObjectReader r(j, "params.lepski");
  LepskiParams p;
  p.sigma_min = r.number("sigma_min");
  if (auto g = r.opt_number("gamma")) p.gamma = *g;
  p.t = r.number("t");
  p.rh_bound = r.opt_number("rh_bound");
  p.trace_bound = r.opt_number("trace_bound");
  if (r.has("rule")) p.rule = parse_rule(r.string("rule"));
  if (r.has("j_max")) p.j_max = static_cast<int>(r.integer("j_max"));
  p.cache_kernel_values = r.boolean("cache_kernel_values", false);
  r.finish();
  try {
    validate(p.to_config());
  } catch (const ParamError& e) {
    throw ConfigError(std::string("params.lepski: ") + e.what());
  }
  return p;
}

inline MaskKind parse_mask(const Json& j) {
  ObjectReader r(j, "params.mask");
  const std::string kind = r.string("kind");
  MaskKind out;
  if (kind == "banded") {
    out = BandedMask{static_cast<Index>(r.integer("b"))};
  } else if (kind == "full") {
    out = FullMask{};
  } else if (kind == "diagonal") {
    out = DiagonalMask{};
  } else {
    throw ConfigError("params.mask.kind: expected banded, full or diagonal, got '" + kind + "'");
  }
  r.finish();
  return out;
}

inline SolverParams parse_solver(const Json& j) {
  ObjectReader r(j, "params.solver");
  SolverParams s;
  if (r.has("max_iter")) s.max_iter = static_cast<int>(r.integer("max_iter"));
  if (auto g = r.opt_number("grad_tol")) s.grad_tol = *g;
  if (r.has("init")) {
    const std::string init = r.string("init");
    if (init == "zero") {
      s.init = InitKind::Zero;
    } else if (init == "plain_ustat") {
      s.init = InitKind::PlainUStat;
    } else {
      throw ConfigError("params.solver.init: expected zero or plain_ustat, got '" + init + "'");
    }
  }
  r.finish();
  if (s.max_iter < 1) throw ConfigError("params.solver.max_iter: must be >= 1");
  if (!(s.grad_tol > 0.0)) throw ConfigError("params.solver.grad_tol: must be positive");
  return s;
}

inline Params parse_params(const Json& j) {
  ObjectReader r(j, "params");
  Params p;
  if (auto s = r.find("sigma")) {
    SigmaSpec sig;
    if (s->get().is_string()) {
      if (s->get().get<std::string>() != "oracle") throw ConfigError("params.sigma: expected a number or \"oracle\"");
      sig.oracle = true;
      sig.kurtosis = r.number("kurtosis");
      if (!(sig.kurtosis >= 1.0)) throw ConfigError("params.kurtosis: must be >= 1");
    } else {
      sig.value = ObjectReader::as_number(s->get(), "params.sigma");
      if (!(sig.value > 0.0)) throw ConfigError("params.sigma: must be positive");
    }
    p.sigma = sig;
  }
  if (r.has("kurtosis") && !(p.sigma && p.sigma->oracle)) {
    throw ConfigError("params.kurtosis: only allowed with sigma = \"oracle\"");
  }
  p.t = r.opt_number("t");
  if (p.t && !(*p.t > 0.0)) throw ConfigError("params.t: must be positive");
  if (auto l = r.find("lepski")) p.lepski = parse_lepski(l->get());
  if (auto d = r.find("delta")) {
    DeltaSpec del;
    if (d->get().is_string()) {
      if (d->get().get<std::string>() != "estimate") {
        throw ConfigError("params.delta: expected a number or \"estimate\"");
      }
      del.estimate = true;
    } else {
      del.value = ObjectReader::as_number(d->get(), "params.delta");
      if (!(del.value > 0.0)) throw ConfigError("params.delta: must be positive");
    }
    p.delta = del;
  }
  if (auto m = r.find("mask")) p.mask = parse_mask(m->get());
  p.tau = r.opt_number("tau");
  if (p.tau && !(*p.tau >= 0.0)) throw ConfigError("params.tau: must be nonnegative");
  p.project_psd = r.boolean("project_psd", false);
  if (auto s = r.find("solver")) p.solver = parse_solver(s->get());
  r.finish();
  return p;
}

inline bool uses(const ExperimentConfig& c, EstimatorKind k) {
  return std::find(c.estimators.begin(), c.estimators.end(), k) != c.estimators.end();
}

/// Every selected estimator has its parameters and every given parameter is
/// used by some selected estimator.
inline void check_consistency(const ExperimentConfig& c) {
  const bool robust = uses(c, EstimatorKind::Robust);
  const bool thresholded = uses(c, EstimatorKind::Thresholded);
  const bool adaptive = uses(c, EstimatorKind::RobustAdaptive);
  const bool masked = uses(c, EstimatorKind::Masked);
  const auto& p = c.params;
  auto need = [](bool cond, const char* what, const char* who) {
    if (!cond) throw ConfigError(std::string("params.") + what + ": required by estimator " + who);
  };
  auto unused = [](bool given, bool used, const char* what) {
    if (given && !used) throw ConfigError(std::string("params.") + what + ": not used by any selected estimator");
  };
  if (robust) {
    need(p.sigma.has_value(), "sigma", "robust");
    need(p.t.has_value(), "t", "robust");
  }
  if (thresholded) {
    need(p.sigma.has_value(), "sigma", "thresholded");
    need(p.t.has_value(), "t", "thresholded");
    need(p.tau.has_value(), "tau", "thresholded");
  }
  if (adaptive) need(p.lepski.has_value(), "lepski", "robust-adaptive");
  if (masked) {
    need(p.mask.has_value(), "mask", "masked");
    need(p.delta.has_value(), "delta", "masked");
    need(p.t.has_value(), "t", "masked");
  }
  unused(p.sigma.has_value(), robust || thresholded, "sigma");
  unused(p.t.has_value(), robust || thresholded || masked, "t");
  unused(p.lepski.has_value(), adaptive, "lepski");
  unused(p.mask.has_value(), masked, "mask");
  unused(p.delta.has_value(), masked, "delta");
  unused(p.tau.has_value(), thresholded, "tau");
  unused(p.project_psd, robust || thresholded, "project_psd");
  if (p.sigma && p.sigma->oracle && !std::holds_alternative<SyntheticSource>(c.data)) {
    throw ConfigError("params.sigma: \"oracle\" needs a synthetic data source");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
  detail::ObjectReader r(j, "config");
  ExperimentConfig c;
  c.data = detail::parse_data(r.at("data"));
  const Json& est = r.at("estimators");
  if (!est.is_array() || est.empty()) throw ConfigError("config.estimators: expected a nonempty array");
  for (const auto& e : est) {
    const EstimatorKind k = estimator_from_name(detail::ObjectReader::as_string(e, "config.estimators"));
    if (detail::uses(c, k)) throw ConfigError(std::string("config.estimators: duplicate '") + estimator_name(k) + "'");
    c.estimators.push_back(k);
  }
  if (auto p = r.find("params")) c.params = detail::parse_params(p->get());
  if (r.has("reps")) {
    const long long reps = r.integer("reps");
    if (reps < 1) throw ConfigError("config.reps: must be >= 1");
    if (reps > std::numeric_limits<int>::max()) throw ConfigError("config.reps: too large");
    c.reps = static_cast<int>(reps);
  }
  c.output = r.string("output");
  if (c.output.empty()) throw ConfigError("config.output: must be nonempty");
  c.record_timing = r.boolean("record_timing", false);
  r.finish();
  detail::check_consistency(c);
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Serialization (canonical: every defaulted field is written)

namespace detail {

inline Json family_json(const Family& f) {
  return std::visit(
      [](const auto& x) -> Json {
        using T = std::decay_t<decltype(x)>;
        Json j{{"name", family_name(x)}};
        if constexpr (std::is_same_v<T, StudentT>) {
          j["dof"] = x.dof;
        } else if constexpr (std::is_same_v<T, LogNormal>) {
          j["scale"] = x.scale;
        } else if constexpr (std::is_same_v<T, ContaminatedGaussian>) {
          j["eps"] = x.eps;
          j["outlier_scale"] = x.outlier_scale;
        }
        return j;
      },
      f);
}

inline Json covariance_json(const CovarianceSpec& c) {
  return std::visit(
      [](const auto& x) -> Json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, ExplicitCovariance>) {
          return Json{{"matrix", x.rows}};
        } else if constexpr (std::is_same_v<T, IdentityModel>) {
          return Json{{"model", "identity"}, {"d", x.d}};
        } else if constexpr (std::is_same_v<T, SpikedModel>) {
          return Json{{"model", "spiked"}, {"d", x.d}, {"rank", x.rank}, {"spike", x.spike},
                      {"identity_base", x.identity_base}};
        } else if constexpr (std::is_same_v<T, ToeplitzModel>) {
          return Json{{"model", "toeplitz"}, {"d", x.d}, {"rho", x.rho}};
        } else {
          return Json{{"model", "banded"}, {"d", x.d}, {"alpha", x.alpha}};
        }
      },
      c);
}

inline Json mask_json(const MaskKind& m) {
  return std::visit(
      [](const auto& x) -> Json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, BandedMask>) {
          return Json{{"kind", "banded"}, {"b", x.b}};
        } else if constexpr (std::is_same_v<T, FullMask>) {
          return Json{{"kind", "full"}};
        } else {
          return Json{{"kind", "diagonal"}};
        }
      },
      m);
}

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  if (const auto* csv = std::get_if<CsvSource>(&c.data)) {
    j["data"] = Json{{"csv", csv->path}};
  } else {
    const auto& s = std::get<SyntheticSource>(c.data);
    Json syn{{"family", detail::family_json(s.family)},
             {"covariance", detail::covariance_json(s.covariance)},
             {"n", s.n},
             {"seed", s.seed}};
    if (!s.mean.empty()) syn["mean"] = s.mean;
    j["data"] = Json{{"synthetic", syn}};
  }
  j["estimators"] = Json::array();
  for (auto k : c.estimators) j["estimators"].push_back(estimator_name(k));

  const Params& p = c.params;
  Json params = Json::object();
  if (p.sigma) {
    if (p.sigma->oracle) {
      params["sigma"] = "oracle";
      params["kurtosis"] = p.sigma->kurtosis;
    } else {
      params["sigma"] = p.sigma->value;
    }
  }
  if (p.t) params["t"] = *p.t;
  if (p.lepski) {
    const auto& l = *p.lepski;
    Json lj{{"sigma_min", l.sigma_min}, {"gamma", l.gamma}, {"t", l.t}, {"j_max", l.j_max},
            {"cache_kernel_values", l.cache_kernel_values}};
    if (l.rh_bound) lj["rh_bound"] = *l.rh_bound;
    if (l.trace_bound) lj["trace_bound"] = *l.trace_bound;
    if (l.rule) lj["rule"] = detail::rule_name(*l.rule);
    params["lepski"] = lj;
  }
  if (p.delta) {
    if (p.delta->estimate) {
      params["delta"] = "estimate";
    } else {
      params["delta"] = p.delta->value;
    }
  }
  if (p.mask) params["mask"] = detail::mask_json(*p.mask);
  if (p.tau) params["tau"] = *p.tau;
  if (p.project_psd) params["project_psd"] = true;
  params["solver"] = Json{{"max_iter", p.solver.max_iter},
                          {"grad_tol", p.solver.grad_tol},
                          {"init", p.solver.init == InitKind::PlainUStat ? "plain_ustat" : "zero"}};
  j["params"] = params;
  j["reps"] = c.reps;
  j["output"] = c.output;
  j["record_timing"] = c.record_timing;
  return j;
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace robust_ustat::cli
