#pragma once

// Wire messages and their canonical JSON encoding.
//
// Objects are emitted compact with keys in byte order. Every real number is a
// fixed-width decimal string such as "+1.2345678901234567e+000": 17
// significant digits round-trip a double exactly, and the constant width
// keeps message sizes independent of the values carried.

#include "fedhte/error.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/tilting.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace fedhte::wire {

using Json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;

inline std::string format_real(double v) {
  if (!std::isfinite(v)) throw ProtocolError("cannot encode non-finite value");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%+.16e", v);
  std::string s(buf);
  // Pad the exponent to three digits.
  const auto e = s.find('e');
  std::string exp = s.substr(e + 2);
  while (exp.size() < 3) exp.insert(exp.begin(), '0');
  return s.substr(0, e + 2) + exp;
}

inline double parse_real(const Json& j, const std::string& field) {
  if (!j.is_string()) throw ProtocolError("field '" + field + "' must be an encoded real");
  const std::string& s = j.get_ref<const std::string&>();
  if (s.size() != 24 || (s[0] != '+' && s[0] != '-')) {
    throw ProtocolError("field '" + field + "' is not a canonical real: '" + s + "'");
  }
  double v = 0.0;
  const char* first = s.data() + (s[0] == '+' ? 1 : 0);
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ProtocolError("field '" + field + "' is not a canonical real: '" + s + "'");
  }
  return v;
}

inline Json encode_vector(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(format_real(v[i]));
  return a;
}

inline Vector decode_vector(const Json& j, const std::string& field,
                            std::optional<Eigen::Index> expected = std::nullopt) {
  if (!j.is_array()) throw ProtocolError("field '" + field + "' must be an array");
  if (expected && static_cast<Eigen::Index>(j.size()) != *expected) {
    throw ProtocolError("field '" + field + "' has length " + std::to_string(j.size()) +
                        ", expected " + std::to_string(*expected));
  }
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = parse_real(j[i], field);
  return v;
}

namespace detail {

inline void require_keys(const Json& j, const std::set<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw ProtocolError(what + " must be an object");
  for (const auto& k : keys) {
    if (!j.contains(k)) throw ProtocolError(what + " is missing field '" + k + "'");
  }
  for (const auto& [k, _] : j.items()) {
    if (!keys.count(k)) throw ProtocolError(what + " has unknown field '" + k + "'");
  }
}

inline std::int64_t get_int(const Json& j, const std::string& field) {
  if (!j.is_number_integer()) throw ProtocolError("field '" + field + "' must be an integer");
  return j.get<std::int64_t>();
}

inline std::uint64_t get_uint(const Json& j, const std::string& field) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    throw ProtocolError("field '" + field + "' must be a nonnegative integer");
  }
  return j.get<std::uint64_t>();
}

inline bool get_flag(const Json& j, const std::string& field) {
  const auto v = get_int(j, field);
  if (v != 0 && v != 1) throw ProtocolError("field '" + field + "' must be 0 or 1");
  return v == 1;
}

inline std::string get_string(const Json& j, const std::string& field) {
  if (!j.is_string()) throw ProtocolError("field '" + field + "' must be a string");
  return j.get<std::string>();
}

inline std::vector<std::string> get_strings(const Json& j, const std::string& field) {
  if (!j.is_array()) throw ProtocolError("field '" + field + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : j) out.push_back(get_string(e, field));
  return out;
}

inline void check_version(const Json& j) {
  const auto v = get_int(j.at("version"), "version");
  if (v != kProtocolVersion) {
    throw ProtocolError("unsupported protocol version " + std::to_string(v) + " (expected " +
                        std::to_string(kProtocolVersion) + ")");
  }
}

}  // namespace detail

// Serializable form of a WorkingDesign. Only the default basis can cross the
// wire, since an arbitrary basis function has no portable description.
struct DesignDescriptor {
  std::string basis = "linear_interaction";
  LinkKind link = LinkKind::logit;
  std::vector<std::string> modifiers;

  static DesignDescriptor from(const WorkingDesign& d) {
    if (d.basis_kind() != BasisKind::linear_interaction) {
      throw ConfigError("custom basis functions cannot be sent to remote sites");
    }
    return {"linear_interaction", d.link().kind(), d.modifier_names()};
  }

  WorkingDesign to_design() const {
    if (basis != "linear_interaction") throw ProtocolError("unknown basis '" + basis + "'");
    return WorkingDesign::standard(LinkFunction(link), modifiers);
  }

  friend bool operator==(const DesignDescriptor&, const DesignDescriptor&) = default;
};

struct MomentRequest {
  std::string config_hash;
  std::string site_id;
  DesignDescriptor design;
  TiltSpec tilt;
  bool tilt_enabled = true;
  GlmSpec ps;
  GlmSpec or_spec;
  Vector full_moments;   // target moments on the full sample (length d)
  Matrix moment_matrix;  // one row per bootstrap replicate (B x d)
  std::uint64_t base_seed = 0;

  int B() const noexcept { return static_cast<int>(moment_matrix.rows()); }
};

struct ReplicateResult {
  Vector p;
  bool nuisance_converged = true;
  bool tilt_converged = true;
  double ess = 0.0;
  double max_weight = 0.0;

  friend bool operator==(const ReplicateResult&, const ReplicateResult&) = default;
};

struct Augmentation {
  std::string site_id;
  std::string config_hash;
  std::int64_t n_m = 0;
  int q = 0;
  ReplicateResult full;
  std::vector<ReplicateResult> replicates;
};

struct ErrorMessage {
  std::string site_id;
  std::string code;  // "config", "data", "numerical", "protocol"
  std::string message;
};

struct Ack {
  std::string site_id;
};

using Message = std::variant<MomentRequest, Augmentation, Ack, ErrorMessage>;

inline Json encode_glm(const GlmSpec& s) {
  return Json{{"family", to_string(s.family)},
              {"intercept", s.include_intercept ? 1 : 0},
              {"predictors", s.predictor_columns},
              {"treatment_terms", s.include_treatment_main_and_interactions ? 1 : 0}};
}

inline GlmSpec decode_glm(const Json& j, const std::string& what) {
  detail::require_keys(j, {"family", "intercept", "predictors", "treatment_terms"}, what);
  GlmSpec s;
  try {
    s.family = glm_family_from_string(detail::get_string(j["family"], what + ".family"));
  } catch (const ConfigError& e) {
    throw ProtocolError(e.what());
  }
  s.include_intercept = detail::get_flag(j["intercept"], what + ".intercept");
  s.predictor_columns = detail::get_strings(j["predictors"], what + ".predictors");
  s.include_treatment_main_and_interactions =
      detail::get_flag(j["treatment_terms"], what + ".treatment_terms");
  return s;
}

inline Json encode_design(const DesignDescriptor& d) {
  return Json{{"basis", d.basis}, {"link", to_string(d.link)}, {"modifiers", d.modifiers}};
}

inline DesignDescriptor decode_design(const Json& j) {
  detail::require_keys(j, {"basis", "link", "modifiers"}, "design");
  DesignDescriptor d;
  d.basis = detail::get_string(j["basis"], "design.basis");
  try {
    d.link = link_kind_from_string(detail::get_string(j["link"], "design.link"));
  } catch (const ConfigError& e) {
    throw ProtocolError(e.what());
  }
  d.modifiers = detail::get_strings(j["modifiers"], "design.modifiers");
  return d;
}

inline Json encode_tilt(const TiltSpec& t, bool enabled) {
  return Json{{"enabled", enabled ? 1 : 0},
              {"normalization", t.include_normalization ? 1 : 0},
              {"r_columns", t.r_columns}};
}

// The part of a request that must agree between coordinator and site.
inline Json config_fields(const DesignDescriptor& design, const TiltSpec& tilt, bool tilt_enabled,
                          const GlmSpec& ps, const GlmSpec& or_spec) {
  return Json{{"design", encode_design(design)},
              {"nuisance", Json{{"or", encode_glm(or_spec)}, {"ps", encode_glm(ps)}}},
              {"tilt", encode_tilt(tilt, tilt_enabled)},
              {"version", kProtocolVersion}};
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

inline std::string config_hash(const DesignDescriptor& design, const TiltSpec& tilt,
                               bool tilt_enabled, const GlmSpec& ps, const GlmSpec& or_spec) {
  return hex64(fnv1a64(config_fields(design, tilt, tilt_enabled, ps, or_spec).dump()));
}

inline std::string config_hash(const MomentRequest& r) {
  return config_hash(r.design, r.tilt, r.tilt_enabled, r.ps, r.or_spec);
}

inline std::string encode(const MomentRequest& r) {
  Json rows = Json::array();
  for (Eigen::Index b = 0; b < r.moment_matrix.rows(); ++b) {
    rows.push_back(encode_vector(r.moment_matrix.row(b).transpose()));
  }
  Json j = config_fields(r.design, r.tilt, r.tilt_enabled, r.ps, r.or_spec);
  j["bootstrap"] = Json{{"B", r.B()}, {"base_seed", r.base_seed}};
  j["config_hash"] = r.config_hash;
  j["full_moments"] = encode_vector(r.full_moments);
  j["kind"] = "moment_request";
  j["moment_matrix"] = rows;
  j["site_id"] = r.site_id;
  return j.dump();
}

inline Json encode_replicate(const ReplicateResult& r) {
  return Json{{"ess", format_real(r.ess)},
              {"max_weight", format_real(r.max_weight)},
              {"nuisance_converged", r.nuisance_converged ? 1 : 0},
              {"p", encode_vector(r.p)},
              {"tilt_converged", r.tilt_converged ? 1 : 0}};
}

inline std::string encode(const Augmentation& a) {
  Json reps = Json::array();
  for (const auto& r : a.replicates) reps.push_back(encode_replicate(r));
  Json j{{"config_hash", a.config_hash},
         {"full", encode_replicate(a.full)},
         {"kind", "augmentation"},
         {"n_m", a.n_m},
         {"q", a.q},
         {"replicates", reps},
         {"site_id", a.site_id},
         {"version", kProtocolVersion}};
  return j.dump();
}

inline std::string encode(const ErrorMessage& e) {
  return Json{{"code", e.code},
              {"kind", "error"},
              {"message", e.message},
              {"site_id", e.site_id},
              {"version", kProtocolVersion}}
      .dump();
}

inline std::string encode(const Ack& a) {
  return Json{{"kind", "ack"}, {"site_id", a.site_id}, {"version", kProtocolVersion}}.dump();
}

inline ReplicateResult decode_replicate(const Json& j, int q, const std::string& what) {
  detail::require_keys(j, {"ess", "max_weight", "nuisance_converged", "p", "tilt_converged"}, what);
  ReplicateResult r;
  r.ess = parse_real(j["ess"], what + ".ess");
  r.max_weight = parse_real(j["max_weight"], what + ".max_weight");
  r.nuisance_converged = detail::get_flag(j["nuisance_converged"], what + ".nuisance_converged");
  r.tilt_converged = detail::get_flag(j["tilt_converged"], what + ".tilt_converged");
  r.p = decode_vector(j["p"], what + ".p", q);
  return r;
}

inline Message decode(const std::string& bytes) {
  Json j;
  try {
    j = Json::parse(bytes);
  } catch (const Json::parse_error& e) {
    throw ProtocolError(std::string("malformed message: ") + e.what());
  }
  if (!j.is_object() || !j.contains("kind") || !j.contains("version")) {
    throw ProtocolError("message lacks 'kind' or 'version'");
  }
  detail::check_version(j);
  const std::string kind = detail::get_string(j["kind"], "kind");
  if (kind == "moment_request") {
    detail::require_keys(j, {"bootstrap", "config_hash", "design", "full_moments", "kind",
                             "moment_matrix", "nuisance", "site_id", "tilt", "version"},
                         "moment_request");
    MomentRequest r;
    r.config_hash = detail::get_string(j["config_hash"], "config_hash");
    r.site_id = detail::get_string(j["site_id"], "site_id");
    r.design = decode_design(j["design"]);
    const Json& t = j["tilt"];
    detail::require_keys(t, {"enabled", "normalization", "r_columns"}, "tilt");
    r.tilt_enabled = detail::get_flag(t["enabled"], "tilt.enabled");
    r.tilt.include_normalization = detail::get_flag(t["normalization"], "tilt.normalization");
    r.tilt.r_columns = detail::get_strings(t["r_columns"], "tilt.r_columns");
    const Json& nu = j["nuisance"];
    detail::require_keys(nu, {"or", "ps"}, "nuisance");
    r.ps = decode_glm(nu["ps"], "nuisance.ps");
    r.or_spec = decode_glm(nu["or"], "nuisance.or");
    const Json& bs = j["bootstrap"];
    detail::require_keys(bs, {"B", "base_seed"}, "bootstrap");
    const auto B = detail::get_int(bs["B"], "bootstrap.B");
    r.base_seed = detail::get_uint(bs["base_seed"], "bootstrap.base_seed");
    const Eigen::Index d = r.tilt.dimension();
    r.full_moments = decode_vector(j["full_moments"], "full_moments", d);
    const Json& mm = j["moment_matrix"];
    if (!mm.is_array() || static_cast<std::int64_t>(mm.size()) != B) {
      throw ProtocolError("moment_matrix must have B = " + std::to_string(B) + " rows");
    }
    r.moment_matrix.resize(static_cast<Eigen::Index>(B), d);
    for (std::size_t b = 0; b < mm.size(); ++b) {
      r.moment_matrix.row(static_cast<Eigen::Index>(b)) =
          decode_vector(mm[b], "moment_matrix", d).transpose();
    }
    return r;
  }
  if (kind == "augmentation") {
    detail::require_keys(j, {"config_hash", "full", "kind", "n_m", "q", "replicates", "site_id",
                             "version"},
                         "augmentation");
    Augmentation a;
    a.config_hash = detail::get_string(j["config_hash"], "config_hash");
    a.site_id = detail::get_string(j["site_id"], "site_id");
    a.n_m = detail::get_int(j["n_m"], "n_m");
    a.q = static_cast<int>(detail::get_int(j["q"], "q"));
    if (a.q < 1) throw ProtocolError("q must be positive");
    a.full = decode_replicate(j["full"], a.q, "full");
    if (!j["replicates"].is_array()) throw ProtocolError("replicates must be an array");
    for (const auto& r : j["replicates"]) a.replicates.push_back(decode_replicate(r, a.q, "replicates"));
    return a;
  }
  if (kind == "error") {
    detail::require_keys(j, {"code", "kind", "message", "site_id", "version"}, "error");
    return ErrorMessage{detail::get_string(j["site_id"], "site_id"),
                        detail::get_string(j["code"], "code"),
                        detail::get_string(j["message"], "message")};
  }
  if (kind == "ack") {
    detail::require_keys(j, {"kind", "site_id", "version"}, "ack");
    return Ack{detail::get_string(j["site_id"], "site_id")};
  }
  throw ProtocolError("unknown message kind '" + kind + "'");
}

template <class T>
T decode_as(const std::string& bytes) {
  Message m = decode(bytes);
  if (auto* p = std::get_if<T>(&m)) return std::move(*p);
  if (auto* e = std::get_if<ErrorMessage>(&m)) {
    throw ProtocolError("site '" + e->site_id + "' replied with error (" + e->code + "): " + e->message);
  }
  throw ProtocolError("unexpected message kind");
}

}  // namespace fedhte::wire
