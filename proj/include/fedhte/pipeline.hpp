#pragma once

// End-to-end analysis at the coordinator: target fits, one protocol round,
// optional source selection, the federated solve and bootstrap errors.

#include "fedhte/dr_solver.hpp"
#include "fedhte/error.hpp"
#include "fedhte/federation/coordinator.hpp"
#include "fedhte/federation/site.hpp"
#include "fedhte/inference.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fedhte {

// Federated estimate on bootstrap replicate b (0-based) under fixed weights.
// Fails the replicate when the target or any positively weighted source
// replicate failed.
inline std::optional<Vector> federated_replicate(
    const TargetBootstrap& tb, int b,
    const std::map<std::string, std::vector<AugmentationVector>>& reps,
    const std::map<std::string, double>& weights, const SolverOptions& solver = {}) {
  const auto k = static_cast<std::size_t>(b);
  if (!tb.ok[k]) return std::nullopt;
  std::vector<AugmentationVector> all;
  AugmentationVector t;
  t.site_id = tb.site_id;
  t.n = tb.n;
  t.p = tb.p1[k];
  all.push_back(std::move(t));
  for (const auto& [site, v] : reps) {
    auto w = weights.find(site);
    if (w == weights.end() || w->second == 0.0) continue;
    if (!v[k].ok()) return std::nullopt;
    all.push_back(v[k]);
  }
  try {
    const Vector p_total = combine_augmentations(all, weights);
    HteEstimate e = solve_beta(tb.projections[k], p_total, std::nullopt, solver);
    if (!e.converged) return std::nullopt;
    return e.beta;
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

// Bootstrap summary of the federated estimator across all B replicates.
inline BootstrapSummary federated_bootstrap(const TargetBootstrap& tb,
                                            const std::map<std::string, std::vector<AugmentationVector>>& reps,
                                            const std::map<std::string, double>& weights,
                                            Eigen::Index q, const SolverOptions& solver = {}) {
  std::vector<std::optional<Vector>> out;
  for (int b = 0; b < tb.B(); ++b) out.push_back(federated_replicate(tb, b, reps, weights, solver));
  BootstrapSummary s = summarize_replicates(out, q);
  check_failure_rate(s, tb.B());
  return s;
}

struct AnalysisConfig {
  WorkingDesign design = WorkingDesign::standard(LinkFunction(LinkKind::logit), {});
  GlmSpec ps;
  GlmSpec or_spec;
  TiltSpec tilt;
  bool tilt_enabled = true;
  WeightScheme weights = WeightScheme::sample_size();
  bool select = false;
  SelectionOptions selection;
  int B = 0;
  std::uint64_t seed = 0;
  bool strict = false;
  SolverOptions solver;
};

struct AnalysisResult {
  HteEstimate target_only;
  HteEstimate federated;
  Vector se;  // of the federated estimate; NaN when unavailable
  Vector ci_lower;
  Vector ci_upper;
  std::map<std::string, double> weights;
  std::optional<SelectionReport> selection;
  std::vector<wire::Unavailable> unavailable;
  std::vector<std::string> warnings;
  std::string transcript_digest;
  int rounds = 0;
  int bootstrap_failures = 0;
};

inline wire::RoundConfig round_config(const AnalysisConfig& cfg) {
  wire::RoundConfig rc;
  rc.design = wire::DesignDescriptor::from(cfg.design);
  rc.tilt = cfg.tilt;
  rc.tilt_enabled = cfg.tilt_enabled;
  rc.ps = cfg.ps;
  rc.or_spec = cfg.or_spec;
  rc.base_seed = cfg.seed;
  return rc;
}

inline AnalysisResult run_analysis(const ObservationTable& target_in,
                                   const std::vector<wire::Channel*>& sites,
                                   const AnalysisConfig& cfg) {
  const ObservationTable target = target_in.with_modifiers(cfg.design.modifier_names());
  const Eigen::Index q = cfg.design.q();
  if (cfg.select && cfg.B < 2) throw ConfigError("source selection needs --bootstrap B >= 2");
  if (cfg.B < 0) throw ConfigError("bootstrap B must be nonnegative");
  AnalysisResult res;

  TargetState state = prepare_target(target, cfg.design, cfg.ps, cfg.or_spec);
  res.target_only = estimate_target_only(target, cfg.design, state, cfg.solver).estimate;

  std::optional<TargetBootstrap> tb;
  if (cfg.B > 0) {
    tb = make_target_bootstrap(target, cfg.design, cfg.ps, cfg.or_spec, cfg.tilt,
                               BootstrapPlan{cfg.B, cfg.seed}, cfg.solver);
  }
  const Matrix moments = tb ? tb->moments : Matrix(0, cfg.tilt.dimension());

  wire::RoundResult round;
  if (!sites.empty()) {
    round = wire::coordinator_round(sites, round_config(cfg), target_moments(target, cfg.tilt),
                                    moments, q);
  }
  res.unavailable = round.unavailable;
  res.transcript_digest = round.transcript.digest();
  res.rounds = round.rounds;
  for (const auto& u : round.unavailable) {
    res.warnings.push_back("site '" + u.site_id + "' excluded: " + u.reason);
  }

  std::vector<AugmentationVector> full;
  std::map<std::string, std::vector<AugmentationVector>> reps;
  for (const auto& a : round.augmentations) {
    full.push_back(wire::to_augmentation_vector(a, a.full));
    reps[a.site_id] = wire::replicate_vectors(a);
  }

  WeightScheme scheme = cfg.weights;
  if (cfg.select && !full.empty()) {
    std::map<std::string, Eigen::Index> sizes;
    for (const auto& a : round.augmentations) sizes[a.site_id] = a.n_m;
    SelectionReport rep = select_from_replicates(*tb, reps, sizes, cfg.weights, cfg.selection);
    for (const auto& w : rep.warnings) res.warnings.push_back(w);
    scheme = WeightScheme::with_weights(rep.final_weights);
    res.selection = std::move(rep);
  }

  FederatedOptions fo;
  fo.strict = cfg.strict;
  fo.solver = cfg.solver;
  FederatedEstimate fed = estimate_federated_from_state(state, full, cfg.design, scheme, fo);
  for (const auto& w : fed.warnings) res.warnings.push_back(w);
  res.federated = fed.estimate;
  res.weights = fed.weights;
  for (const auto& u : round.unavailable) res.weights[u.site_id] = 0.0;

  res.se = Vector::Constant(q, std::nan(""));
  if (tb) {
    std::map<std::string, std::vector<AugmentationVector>> used;
    for (const auto& [site, v] : reps) {
      if (res.weights.count(site) && res.weights.at(site) > 0.0) used[site] = v;
    }
    BootstrapSummary bs = federated_bootstrap(*tb, used, res.weights, q, cfg.solver);
    res.bootstrap_failures = bs.failures;
    res.federated.covariance = (bs.replicates.rows() > 1)
                                   ? Matrix((bs.replicates.rowwise() - bs.replicates.colwise().mean())
                                                .transpose() *
                                            (bs.replicates.rowwise() - bs.replicates.colwise().mean()) /
                                            static_cast<double>(bs.replicates.rows() - 1))
                                   : Matrix(Matrix::Zero(q, q));
    res.federated.se_source = SeSource::bootstrap;
    res.se = bs.se;

    std::vector<std::optional<Vector>> t_reps;
    for (int b = 0; b < tb->B(); ++b) {
      t_reps.push_back(tb->ok[static_cast<std::size_t>(b)]
                           ? std::optional<Vector>(tb->beta.row(b).transpose())
                           : std::nullopt);
    }
    const BootstrapSummary ts = summarize_replicates(t_reps, q);
    res.target_only.covariance = Matrix(ts.se.cwiseAbs2().asDiagonal());
    if (ts.replicates.rows() > 1) {
      const Matrix c = ts.replicates.rowwise() - ts.replicates.colwise().mean();
      res.target_only.covariance = c.transpose() * c / static_cast<double>(ts.replicates.rows() - 1);
    }
    res.target_only.se_source = SeSource::bootstrap;
  } else {
    res.target_only.covariance = sandwich_variance_target(target, cfg.design, state.ps_fit,
                                                          state.or_fit, res.target_only.beta);
    res.target_only.se_source = SeSource::sandwich;
    const bool only_target = std::all_of(res.weights.begin(), res.weights.end(), [&](const auto& kv) {
      return kv.first == target.site_id() || kv.second == 0.0;
    });
    if (only_target) {
      res.federated.covariance = res.target_only.covariance;
      res.federated.se_source = SeSource::sandwich;
      res.se = res.target_only.standard_errors();
    }
  }
  res.ci_lower = res.federated.beta - kZ975 * res.se;
  res.ci_upper = res.federated.beta + kZ975 * res.se;
  return res;
}

}  // namespace fedhte
