#pragma once

// Analysis configuration file (JSON, versioned). Every key is checked; an
// unknown key is an error that names it.
//
// {
//   "version": 1,
//   "data":      {"outcome": "Y", "treatment": "A", "covariates": [...], "delimiter": ","},
//   "design":    {"link": "logit", "modifiers": ["X1"]},
//   "propensity":    {"predictors": [...]},
//   "outcome_model": {"family": "bernoulli_logit", "predictors": [...]},
//   "tilt":      {"columns": [...], "enabled": true},
//   "weights":   "sample_size" | "uniform" | "target_only" | {"site": w, ...},
//   "selection": {"rule": "intersection" | "chi_square", "level": 0.95}
// }
//
// Only "version", "data", "design", "propensity" and "outcome_model" are
// required. Tilt columns default to the propensity predictors.

#include "fedhte/dr_solver.hpp"
#include "fedhte/error.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/inference.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/table_io.hpp"
#include "fedhte/tilting.hpp"

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fedhte {

inline constexpr int kConfigVersion = 1;

struct AnalysisSpec {
  CsvSchema schema;
  WorkingDesign design = WorkingDesign::standard(LinkFunction(LinkKind::logit), {});
  GlmSpec ps;
  GlmSpec or_spec;
  TiltSpec tilt;
  bool tilt_enabled = true;
  WeightScheme weights = WeightScheme::sample_size();
  SelectionOptions selection;
};

namespace detail {

using Json = nlohmann::json;

inline void only_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("config: unknown key '" + it.key() + "' in '" + where + "'");
    }
  }
}

inline std::vector<std::string> string_list(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError("config: '" + where + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : j) {
    if (!e.is_string()) throw ConfigError("config: '" + where + "' must be an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline std::string string_at(const Json& j, const std::string& key, const std::string& where,
                             std::string fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigError("config: '" + where + "." + key + "' must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace detail

inline AnalysisSpec parse_analysis_spec(const std::string& text) {
  using detail::Json;
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  detail::only_keys(j, {"version", "data", "design", "propensity", "outcome_model", "tilt", "weights",
                        "selection"},
                    "(top level)");
  if (!j.contains("version") || !j.at("version").is_number_integer()) {
    throw ConfigError("config: integer 'version' is required");
  }
  if (j.at("version").get<int>() != kConfigVersion) {
    throw ConfigError("config: unsupported version " + std::to_string(j.at("version").get<int>()) +
                      " (expected " + std::to_string(kConfigVersion) + ")");
  }
  for (const char* k : {"data", "design", "propensity", "outcome_model"}) {
    if (!j.contains(k)) throw ConfigError(std::string("config: '") + k + "' is required");
  }
  AnalysisSpec s;

  const Json& data = j.at("data");
  detail::only_keys(data, {"outcome", "treatment", "covariates", "delimiter"}, "data");
  s.schema.outcome = detail::string_at(data, "outcome", "data", "Y");
  s.schema.treatment = detail::string_at(data, "treatment", "data", "A");
  if (data.contains("covariates")) s.schema.covariates = detail::string_list(data.at("covariates"), "data.covariates");
  const std::string delim = detail::string_at(data, "delimiter", "data", ",");
  if (delim.size() != 1) throw ConfigError("config: 'data.delimiter' must be one character");
  s.schema.delimiter = delim[0];

  const Json& design = j.at("design");
  detail::only_keys(design, {"link", "modifiers"}, "design");
  const LinkKind link = link_kind_from_string(detail::string_at(design, "link", "design", "logit"));
  std::vector<std::string> mods;
  if (design.contains("modifiers")) mods = detail::string_list(design.at("modifiers"), "design.modifiers");
  s.design = WorkingDesign::standard(LinkFunction(link), mods);
  s.schema.modifiers = mods;

  const Json& ps = j.at("propensity");
  detail::only_keys(ps, {"predictors"}, "propensity");
  s.ps.family = GlmFamily::bernoulli_logit;
  s.ps.predictor_columns = detail::string_list(ps.value("predictors", Json::array()), "propensity.predictors");

  const Json& om = j.at("outcome_model");
  detail::only_keys(om, {"family", "predictors"}, "outcome_model");
  s.or_spec.family = glm_family_from_string(
      detail::string_at(om, "family", "outcome_model",
                        link == LinkKind::logit ? "bernoulli_logit" : "gaussian_identity"));
  s.or_spec.include_treatment_main_and_interactions = true;
  s.or_spec.predictor_columns =
      detail::string_list(om.value("predictors", Json::array()), "outcome_model.predictors");

  if (j.contains("tilt")) {
    const Json& t = j.at("tilt");
    detail::only_keys(t, {"columns", "enabled"}, "tilt");
    s.tilt.r_columns = detail::string_list(t.value("columns", Json::array()), "tilt.columns");
    if (t.contains("enabled")) {
      if (!t.at("enabled").is_boolean()) throw ConfigError("config: 'tilt.enabled' must be true or false");
      s.tilt_enabled = t.at("enabled").get<bool>();
    }
  } else {
    s.tilt.r_columns = s.ps.predictor_columns;
  }
  if (s.tilt.r_columns.empty()) {
    throw ConfigError("config: 'tilt.columns' is empty and there are no propensity predictors to default to");
  }

  if (j.contains("weights")) {
    const Json& w = j.at("weights");
    if (w.is_string()) {
      const WeightKind k = weight_kind_from_string(w.get<std::string>());
      if (k == WeightKind::explicit_weights) throw ConfigError("config: explicit weights need a site map");
      s.weights = WeightScheme{k, {}};
    } else if (w.is_object()) {
      std::map<std::string, double> m;
      for (auto it = w.begin(); it != w.end(); ++it) {
        if (!it.value().is_number()) throw ConfigError("config: weight for '" + it.key() + "' must be a number");
        m[it.key()] = it.value().get<double>();
      }
      s.weights = WeightScheme::with_weights(m);
    } else {
      throw ConfigError("config: 'weights' must be a scheme name or a site-to-weight map");
    }
  }

  if (j.contains("selection")) {
    const Json& sel = j.at("selection");
    detail::only_keys(sel, {"rule", "level"}, "selection");
    s.selection.rule = selection_rule_from_string(detail::string_at(sel, "rule", "selection", "intersection"));
    if (sel.contains("level")) {
      const double lv = sel.at("level").get<double>();
      if (!(lv > 0.0 && lv < 1.0)) throw ConfigError("config: 'selection.level' must lie in (0, 1)");
      s.selection.level = lv;
      s.selection.z = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * lv);
    }
  }

  return s;
}

inline AnalysisSpec load_analysis_spec(const std::filesystem::path& path) {
  return parse_analysis_spec(read_file(path));
}

}  // namespace fedhte
