#pragma once

#include "fedhte/dr_solver.hpp"
#include "fedhte/error.hpp"
#include "fedhte/federation/codec.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/tilting.hpp"

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fedhte::wire {

struct SiteOptions {
  IrlsOptions irls;
  TiltOptions tilt;
  // Replicate fits start from the full-sample estimates.
  bool warm_start = true;
  // When set, requests carrying another config hash are refused.
  std::optional<std::string> expected_config_hash;
};

// What one site computes for one request: the tilted aggregates that go on
// the wire and, on request, the untilted ones from the same nuisance fits.
struct SiteComputation {
  Augmentation tilted;
  Augmentation untilted;
};

namespace detail {

inline std::vector<std::string> missing_columns(const ObservationTable& t, const MomentRequest& r) {
  std::set<std::string> wanted(r.design.modifiers.begin(), r.design.modifiers.end());
  wanted.insert(r.tilt.r_columns.begin(), r.tilt.r_columns.end());
  wanted.insert(r.ps.predictor_columns.begin(), r.ps.predictor_columns.end());
  wanted.insert(r.or_spec.predictor_columns.begin(), r.or_spec.predictor_columns.end());
  std::vector<std::string> out;
  for (const auto& c : wanted) {
    if (!t.has_column(c)) out.push_back(c);
  }
  return out;
}

struct FitCache {
  std::optional<Vector> ps;
  std::optional<Vector> or_coef;
  std::optional<Vector> alpha;
};

inline ReplicateResult failed_replicate(Eigen::Index q) {
  ReplicateResult r;
  r.p = Vector::Zero(q);
  r.nuisance_converged = false;
  r.tilt_converged = false;
  return r;
}

// Computes (tilted, untilted) aggregates for one sample.
inline std::pair<ReplicateResult, ReplicateResult> site_replicate(
    const ObservationTable& t, const MomentRequest& req, const WorkingDesign& design,
    const Vector& moments, const SiteOptions& opt, const FitCache& warm, FitCache* fitted,
    bool full_sample) {
  IrlsOptions irls = opt.irls;
  if (!full_sample) irls.check_rank = false;
  const NuisanceFit ps = fit_ps(t, req.ps, irls, warm.ps);
  const NuisanceFit orf = fit_or(t, req.or_spec, irls, warm.or_coef);
  const DesignRows rows = build_design_rows(t, design);
  const AugmentationKernel k = augmentation_kernel(t, rows, ps, orf);
  const bool nuisance_ok = ps.converged && orf.converged;

  ReplicateResult plain;
  plain.p = augmentation_mean(k, nullptr);
  plain.nuisance_converged = nuisance_ok && plain.p.allFinite();
  plain.tilt_converged = true;
  plain.ess = static_cast<double>(t.n());
  plain.max_weight = 1.0;
  if (!plain.p.allFinite()) plain.p.setZero();

  ReplicateResult tilted = plain;
  if (req.tilt_enabled) {
    const Matrix r = tilt_features(t, req.tilt);
    const TiltFit tf = fit_tilt(r, moments, opt.tilt, warm.alpha, t.site_id());
    const Vector tau = tilt_weights(r, tf.alpha);
    tilted.p = augmentation_mean(k, &tau);
    tilted.tilt_converged = tf.converged && tilted.p.allFinite();
    tilted.ess = std::isfinite(tf.ess) ? tf.ess : 0.0;
    tilted.max_weight = std::isfinite(tf.max_weight) ? tf.max_weight : 0.0;
    if (!tilted.p.allFinite()) {
      tilted.p.setZero();
      tilted.tilt_converged = false;
    }
    if (fitted) fitted->alpha = tf.alpha;
  }
  if (fitted) {
    fitted->ps = ps.coefficients;
    fitted->or_coef = orf.coefficients;
  }
  return {tilted, plain};
}

}  // namespace detail

// Validates the request against the local data and computes the full-sample
// aggregate plus one aggregate per bootstrap replicate. Replicate b resamples
// with a seed derived from (base_seed, local site id, b) only.
inline SiteComputation compute_site(const ObservationTable& local, const MomentRequest& req,
                                    const SiteOptions& opt = {}) {
  if (req.config_hash != config_hash(req)) {
    throw ProtocolError("config hash " + req.config_hash +
                        " does not match the request contents (" + config_hash(req) + ")");
  }
  if (opt.expected_config_hash && *opt.expected_config_hash != req.config_hash) {
    throw ProtocolError("site expects config hash " + *opt.expected_config_hash +
                        ", request carries " + req.config_hash);
  }
  if (req.site_id != local.site_id()) {
    throw ProtocolError("request addressed to site '" + req.site_id + "', this is site '" +
                        local.site_id() + "'");
  }
  const auto missing = detail::missing_columns(local, req);
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw ConfigError("site '" + local.site_id() + "' lacks requested column(s): " + names);
  }
  const ObservationTable t = local.with_modifiers(req.design.modifiers);
  const WorkingDesign design = req.design.to_design();
  if (design.link().requires_binary_outcome() && !t.outcome_is_binary()) {
    throw DataError("site '" + t.site_id() + "': logit link requires a 0/1 outcome");
  }
  const Eigen::Index q = design.q();

  SiteComputation out;
  for (Augmentation* a : {&out.tilted, &out.untilted}) {
    a->site_id = t.site_id();
    a->config_hash = req.config_hash;
    a->n_m = t.n();
    a->q = static_cast<int>(q);
  }
  detail::FitCache full_fit;
  auto [ft, fu] =
      detail::site_replicate(t, req, design, req.full_moments, opt, {}, &full_fit, true);
  out.tilted.full = ft;
  out.untilted.full = fu;
  const detail::FitCache warm = opt.warm_start ? full_fit : detail::FitCache{};

  for (int b = 1; b <= req.B(); ++b) {
    const auto idx = bootstrap_indices(
        t.n(), replicate_seed(req.base_seed, t.site_id(), static_cast<std::uint64_t>(b)));
    const ObservationTable rb = t.resample(idx);
    try {
      auto [rt, ru] = detail::site_replicate(rb, req, design, req.moment_matrix.row(b - 1).transpose(),
                                             opt, warm, nullptr, false);
      out.tilted.replicates.push_back(std::move(rt));
      out.untilted.replicates.push_back(std::move(ru));
    } catch (const DataError&) {
      out.tilted.replicates.push_back(detail::failed_replicate(q));
      out.untilted.replicates.push_back(detail::failed_replicate(q));
    } catch (const NumericalError&) {
      out.tilted.replicates.push_back(detail::failed_replicate(q));
      out.untilted.replicates.push_back(detail::failed_replicate(q));
    }
  }
  return out;
}

inline Augmentation site_serve(const ObservationTable& local, const MomentRequest& req,
                               const SiteOptions& opt = {}) {
  return compute_site(local, req, opt).tilted;
}

inline std::string error_code(const std::exception& e) {
  if (dynamic_cast<const ProtocolError*>(&e)) return "protocol";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const NumericalError*>(&e)) return "numerical";
  return "internal";
}

// Bytes in, bytes out: the whole of a site's protocol behaviour. Failures are
// reported to the coordinator as an error message rather than thrown.
inline std::string handle_request(const ObservationTable& local, const std::string& bytes,
                                  const SiteOptions& opt = {}) {
  try {
    const MomentRequest req = decode_as<MomentRequest>(bytes);
    return encode(site_serve(local, req, opt));
  } catch (const std::exception& e) {
    return encode(ErrorMessage{local.site_id(), error_code(e), e.what()});
  }
}

// Converts wire aggregates into solver inputs.
inline AugmentationVector to_augmentation_vector(const Augmentation& a, const ReplicateResult& r,
                                                 std::optional<int> replicate = std::nullopt) {
  AugmentationVector v;
  v.site_id = a.site_id;
  v.n = a.n_m;
  v.p = r.p;
  v.replicate = replicate;
  v.nuisance_converged = r.nuisance_converged;
  v.tilt_converged = r.tilt_converged;
  return v;
}

inline std::vector<AugmentationVector> replicate_vectors(const Augmentation& a) {
  std::vector<AugmentationVector> out;
  for (std::size_t b = 0; b < a.replicates.size(); ++b) {
    out.push_back(to_augmentation_vector(a, a.replicates[b], static_cast<int>(b) + 1));
  }
  return out;
}

}  // namespace fedhte::wire
