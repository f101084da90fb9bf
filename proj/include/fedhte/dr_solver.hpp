#pragma once

#include "fedhte/error.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/tilting.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fedhte {

// A site's fixed-length aggregate: the only statistic that leaves a source.
struct AugmentationVector {
  std::string site_id;
  Eigen::Index n = 0;
  Vector p;
  std::optional<int> replicate;
  bool nuisance_converged = true;
  bool tilt_converged = true;

  bool ok() const noexcept { return nuisance_converged && tilt_converged && p.allFinite(); }
};

// Row-level ingredients shared by every augmentation variant: the basis row
// at the observed arm and (y_i - g(A_i, x_i)) / pi(A_i, x_i). Only the observed
// arm contributes because of the indicator 1{A_i = a}.
struct AugmentationKernel {
  Matrix observed_rows;
  Vector scaled_residual;
};

inline AugmentationKernel augmentation_kernel(const ObservationTable& table, const DesignRows& rows,
                                              const NuisanceFit& ps, const NuisanceFit& or_fit,
                                              std::optional<double> clip = std::nullopt) {
  const Eigen::Index n = table.n();
  const Vector pi1 = predict_ps(ps, table, 1);
  const Vector g_obs = predict_or_observed(or_fit, table);
  AugmentationKernel k{Matrix(n, rows.arm0.cols()), Vector(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool treated = table.treatment()[i] == 1.0;
    double pi = treated ? pi1[i] : 1.0 - pi1[i];
    if (clip) pi = std::clamp(pi, *clip, 1.0 - *clip);
    if (!(pi > 0.0)) {
      throw DataError("site '" + table.site_id() + "': estimated probability of the observed "
                      "treatment is 0 at row " + std::to_string(i + 1) +
                      " (positivity of treatment assignment violated)");
    }
    k.observed_rows.row(i) = treated ? rows.arm1.row(i) : rows.arm0.row(i);
    k.scaled_residual[i] = (table.outcome()[i] - g_obs[i]) / pi;
  }
  return k;
}

// Per-row terms eta(x~_i, A_i) tau_i (y_i - g) / pi, one row per subject.
inline Matrix augmentation_terms(const AugmentationKernel& k, const Vector* tau) {
  Vector c = k.scaled_residual;
  if (tau) c.array() *= tau->array();
  return k.observed_rows.array().colwise() * c.array();
}

inline Matrix augmentation_terms(const ObservationTable& table, const DesignRows& rows,
                                 const NuisanceFit& ps, const NuisanceFit& or_fit,
                                 const Vector* tau, std::optional<double> clip = std::nullopt) {
  return augmentation_terms(augmentation_kernel(table, rows, ps, or_fit, clip), tau);
}

// (1/n) sum_i of the terms above.
inline Vector augmentation_mean(const AugmentationKernel& k, const Vector* tau) {
  Vector c = k.scaled_residual;
  if (tau) c.array() *= tau->array();
  return k.observed_rows.transpose() * c / static_cast<double>(c.size());
}

namespace detail {

inline AugmentationVector make_augmentation(const ObservationTable& table, Vector p,
                                            bool nuisance_ok, bool tilt_ok) {
  AugmentationVector v;
  v.site_id = table.site_id();
  v.n = table.n();
  v.p = std::move(p);
  v.nuisance_converged = nuisance_ok;
  v.tilt_converged = tilt_ok;
  return v;
}

}  // namespace detail

// P_1 for the target: no tilt, no dependence on beta.
inline AugmentationVector compute_p_target(const ObservationTable& table,
                                           const WorkingDesign& design, const NuisanceFit& ps,
                                           const NuisanceFit& or_fit,
                                           std::optional<double> clip = std::nullopt) {
  const DesignRows rows = build_design_rows(table, design);
  const AugmentationKernel k = augmentation_kernel(table, rows, ps, or_fit, clip);
  return detail::make_augmentation(table, augmentation_mean(k, nullptr),
                                   ps.converged && or_fit.converged, true);
}

// P_m for a source, reweighted by its fitted density ratio.
inline AugmentationVector compute_p_source(const ObservationTable& table,
                                           const WorkingDesign& design, const NuisanceFit& ps,
                                           const NuisanceFit& or_fit, const TiltFit& tilt,
                                           const TiltSpec& tilt_spec,
                                           std::optional<double> clip = std::nullopt) {
  const DesignRows rows = build_design_rows(table, design);
  const Vector tau = tilt_weights(table, tilt_spec, tilt.alpha);
  const AugmentationKernel k = augmentation_kernel(table, rows, ps, or_fit, clip);
  return detail::make_augmentation(table, augmentation_mean(k, &tau),
                                   ps.converged && or_fit.converged, tilt.converged);
}

// The beta-dependent part of the estimating equation, built from the target
// rows only:
//   Q(beta) = (1/n) sum_i sum_a eta(x~_i, a) [g(a, x_i) - l^{-1}(eta' beta)].
class OutcomeProjection {
 public:
  OutcomeProjection() = default;

  OutcomeProjection(DesignRows rows, Vector g0, Vector g1, LinkFunction link)
      : rows_(std::move(rows)), g0_(std::move(g0)), g1_(std::move(g1)), link_(link) {
    if (link_.kind() == LinkKind::log &&
        ((g0_.array() < 0.0).any() || (g1_.array() < 0.0).any())) {
      throw DataError("log link requires nonnegative outcome-regression predictions");
    }
    // g-terms do not depend on beta; fold them once.
    gsum_ = (rows_.arm0.transpose() * g0_ + rows_.arm1.transpose() * g1_) / n_double();
  }

  static OutcomeProjection from_fit(const ObservationTable& table, const WorkingDesign& design,
                                    const NuisanceFit& or_fit) {
    return OutcomeProjection(build_design_rows(table, design), predict_or(or_fit, table, 0),
                             predict_or(or_fit, table, 1), design.link());
  }

  Eigen::Index n() const noexcept { return rows_.arm0.rows(); }
  Eigen::Index q() const noexcept { return rows_.arm0.cols(); }
  const DesignRows& rows() const noexcept { return rows_; }
  const Vector& g(int a) const noexcept { return a == 0 ? g0_ : g1_; }
  const LinkFunction& link() const noexcept { return link_; }

  Vector value(const Vector& beta) const {
    const Vector m0 = (rows_.arm0 * beta).unaryExpr([this](double e) { return link_.inverse(e); });
    const Vector m1 = (rows_.arm1 * beta).unaryExpr([this](double e) { return link_.inverse(e); });
    return gsum_ - (rows_.arm0.transpose() * m0 + rows_.arm1.transpose() * m1) / n_double();
  }

  // d value / d beta = -(1/n) sum_i sum_a eta (l^{-1})'(eta' beta) eta'.
  Matrix jacobian(const Vector& beta) const {
    const Vector d0 =
        (rows_.arm0 * beta).unaryExpr([this](double e) { return link_.inverse_derivative(e); });
    const Vector d1 =
        (rows_.arm1 * beta).unaryExpr([this](double e) { return link_.inverse_derivative(e); });
    const Matrix w0 = rows_.arm0.array().colwise() * d0.array();
    const Matrix w1 = rows_.arm1.array().colwise() * d1.array();
    return -(rows_.arm0.transpose() * w0 + rows_.arm1.transpose() * w1) / n_double();
  }

  // Per-row terms q_i(beta), n x q.
  Matrix terms(const Vector& beta) const {
    Matrix out(n(), q());
    for (Eigen::Index i = 0; i < n(); ++i) {
      const double r0 = g0_[i] - link_.inverse(rows_.arm0.row(i).dot(beta));
      const double r1 = g1_[i] - link_.inverse(rows_.arm1.row(i).dot(beta));
      out.row(i) = rows_.arm0.row(i) * r0 + rows_.arm1.row(i) * r1;
    }
    return out;
  }

  // Start value: least squares of l(g) on the stacked basis rows.
  Vector projection_start() const {
    const Eigen::Index q_ = q();
    Matrix gram = rows_.arm0.transpose() * rows_.arm0 + rows_.arm1.transpose() * rows_.arm1;
    auto lg = [this](double v) {
      if (link_.kind() == LinkKind::logit) v = std::clamp(v, 1e-6, 1.0 - 1e-6);
      if (link_.kind() == LinkKind::log) v = std::max(v, 1e-12);
      return link_.forward(v);
    };
    const Vector rhs = rows_.arm0.transpose() * g0_.unaryExpr(lg) +
                       rows_.arm1.transpose() * g1_.unaryExpr(lg);
    Eigen::LDLT<Matrix> ldlt(gram);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return Vector::Zero(q_);
    Vector b = ldlt.solve(rhs);
    return b.allFinite() ? b : Vector::Zero(q_);
  }

 private:
  double n_double() const noexcept { return static_cast<double>(rows_.arm0.rows()); }

  DesignRows rows_;
  Vector g0_;
  Vector g1_;
  LinkFunction link_;
  Vector gsum_;
};

struct SolverOptions {
  int max_iterations = 200;
  double tolerance = 1e-9;
  int max_halvings = 40;
};

// Residual of the combined estimating equation: p_total + Q(beta).
inline Vector dr_residual(const OutcomeProjection& proj, const Vector& p_total, const Vector& beta) {
  return p_total + proj.value(beta);
}

// Solves p_total + Q(beta) = 0 by Newton's method with step-halving. The
// augmentation total is fixed across iterations.
inline HteEstimate solve_beta(const OutcomeProjection& proj, const Vector& p_total,
                              std::optional<Vector> init = std::nullopt,
                              const SolverOptions& opt = {}) {
  if (p_total.size() != proj.q()) {
    throw ConfigError("augmentation length " + std::to_string(p_total.size()) +
                      " does not match design dimension " + std::to_string(proj.q()));
  }
  HteEstimate est;
  Vector beta = init ? *init : proj.projection_start();
  Vector f = dr_residual(proj, p_total, beta);
  if (!f.allFinite()) {
    beta = Vector::Zero(proj.q());
    f = dr_residual(proj, p_total, beta);
  }
  double merit = f.norm();
  for (int it = 0; it < opt.max_iterations; ++it) {
    est.solver_iterations = it;
    if (f.cwiseAbs().maxCoeff() < opt.tolerance) {
      est.converged = true;
      break;
    }
    const Matrix neg_jac = -proj.jacobian(beta);
    Eigen::LDLT<Matrix> ldlt(neg_jac);
    const double dmax = ldlt.vectorD().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-13 * std::max(dmax, 1e-300)) {
      throw NumericalError("design not identified (collinear eta or degenerate modifiers)");
    }
    const Vector step = ldlt.solve(f);  // beta_new = beta - J^{-1} f = beta + (-J)^{-1} f
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k <= opt.max_halvings; ++k) {
      const Vector cand = beta + t * step;
      const Vector f_new = dr_residual(proj, p_total, cand);
      const double m_new = f_new.norm();
      if (f_new.allFinite() && m_new < merit) {
        beta = cand;
        f = f_new;
        merit = m_new;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    est.solver_iterations = it + 1;
    if (!accepted) break;
  }
  if (!est.converged && f.cwiseAbs().maxCoeff() < opt.tolerance) est.converged = true;
  est.beta = beta;
  return est;
}

enum class WeightKind { target_only, sample_size_proportional, uniform, explicit_weights };

inline std::string to_string(WeightKind k) {
  switch (k) {
    case WeightKind::target_only: return "target_only";
    case WeightKind::sample_size_proportional: return "sample_size";
    case WeightKind::uniform: return "uniform";
    case WeightKind::explicit_weights: return "explicit";
  }
  return "?";
}

inline WeightKind weight_kind_from_string(const std::string& s) {
  if (s == "target_only") return WeightKind::target_only;
  if (s == "sample_size" || s == "sample_size_proportional") return WeightKind::sample_size_proportional;
  if (s == "uniform") return WeightKind::uniform;
  if (s == "explicit") return WeightKind::explicit_weights;
  throw ConfigError("unknown weight scheme '" + s + "'");
}

struct WeightScheme {
  WeightKind kind = WeightKind::sample_size_proportional;
  std::map<std::string, double> explicit_weights;

  static WeightScheme target_only() { return {WeightKind::target_only, {}}; }
  static WeightScheme sample_size() { return {WeightKind::sample_size_proportional, {}}; }
  static WeightScheme uniform() { return {WeightKind::uniform, {}}; }
  static WeightScheme with_weights(std::map<std::string, double> w) {
    return {WeightKind::explicit_weights, std::move(w)};
  }
};

// Site weights over {target} and the listed sources; sums to one.
inline std::map<std::string, double> resolve_weights(
    const WeightScheme& scheme, const std::string& target_id, Eigen::Index n_target,
    const std::vector<std::pair<std::string, Eigen::Index>>& sources) {
  std::map<std::string, double> w;
  switch (scheme.kind) {
    case WeightKind::target_only:
      w[target_id] = 1.0;
      for (const auto& s : sources) w[s.first] = 0.0;
      break;
    case WeightKind::sample_size_proportional: {
      double total = static_cast<double>(n_target);
      for (const auto& s : sources) total += static_cast<double>(s.second);
      w[target_id] = static_cast<double>(n_target) / total;
      for (const auto& s : sources) w[s.first] = static_cast<double>(s.second) / total;
      break;
    }
    case WeightKind::uniform: {
      const double u = 1.0 / static_cast<double>(sources.size() + 1);
      w[target_id] = u;
      for (const auto& s : sources) w[s.first] = u;
      break;
    }
    case WeightKind::explicit_weights: {
      double total = 0.0;
      auto take = [&](const std::string& id) {
        auto it = scheme.explicit_weights.find(id);
        if (it == scheme.explicit_weights.end()) {
          throw ConfigError("explicit weights do not list site '" + id + "'");
        }
        if (!(it->second >= 0.0)) throw ConfigError("negative weight for site '" + id + "'");
        w[id] = it->second;
        total += it->second;
      };
      take(target_id);
      for (const auto& s : sources) take(s.first);
      for (const auto& [id, _] : scheme.explicit_weights) {
        if (!w.count(id)) throw ConfigError("explicit weights name unknown site '" + id + "'");
      }
      if (!(total > 0.0)) throw ConfigError("explicit weights sum to zero");
      if (std::abs(total - 1.0) > 1e-12) {
        for (auto& [_, v] : w) v /= total;
      }
      break;
    }
  }
  return w;
}

// sum_m w_m P_m accumulated in ascending site_id order with compensated
// summation. Sites with zero weight are skipped.
inline Vector combine_augmentations(const std::vector<AugmentationVector>& all,
                                    const std::map<std::string, double>& weights) {
  if (all.empty()) throw ConfigError("no augmentation vectors to combine");
  std::vector<const AugmentationVector*> order;
  for (const auto& v : all) order.push_back(&v);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->site_id < b->site_id; });
  const Eigen::Index q = all.front().p.size();
  KahanVectorSum acc(q);
  for (const auto* v : order) {
    if (v->p.size() != q) {
      throw ConfigError("augmentation from site '" + v->site_id + "' has length " +
                        std::to_string(v->p.size()) + ", expected " + std::to_string(q));
    }
    auto it = weights.find(v->site_id);
    if (it == weights.end()) throw ConfigError("no weight for site '" + v->site_id + "'");
    if (it->second == 0.0) continue;
    if (it->second == 1.0) {
      acc.add(v->p);
    } else {
      acc.add(it->second * v->p);
    }
  }
  return acc.sum();
}

// Everything the coordinator holds about its own site: nuisance fits, P_1 and
// the beta-dependent projection.
struct TargetState {
  NuisanceFit ps_fit;
  NuisanceFit or_fit;
  AugmentationVector p1;
  OutcomeProjection projection;
};

inline TargetState prepare_target(const ObservationTable& table, const WorkingDesign& design,
                                  const NuisanceFit& ps_fit, const NuisanceFit& or_fit,
                                  std::optional<double> clip = std::nullopt) {
  if (design.link().requires_binary_outcome() && !table.outcome_is_binary()) {
    throw DataError("site '" + table.site_id() + "': logit link requires a 0/1 outcome");
  }
  TargetState s;
  s.ps_fit = ps_fit;
  s.or_fit = or_fit;
  s.p1 = compute_p_target(table, design, ps_fit, or_fit, clip);
  s.projection = OutcomeProjection::from_fit(table, design, or_fit);
  return s;
}

inline TargetState prepare_target(const ObservationTable& table, const WorkingDesign& design,
                                  const GlmSpec& ps_spec, const GlmSpec& or_spec,
                                  const IrlsOptions& irls = {},
                                  std::optional<double> clip = std::nullopt) {
  return prepare_target(table, design, fit_ps(table, ps_spec, irls), fit_or(table, or_spec, irls),
                        clip);
}

struct TargetOnlyResult {
  HteEstimate estimate;
  TargetState state;
};

inline TargetOnlyResult estimate_target_only(const ObservationTable& table,
                                             const WorkingDesign& design, TargetState state,
                                             const SolverOptions& opt = {}) {
  HteEstimate est = solve_beta(state.projection, state.p1.p, std::nullopt, opt);
  est.labels = design.labels();
  est.converged = est.converged && state.p1.nuisance_converged;
  (void)table;
  return {std::move(est), std::move(state)};
}

inline TargetOnlyResult estimate_target_only(const ObservationTable& table,
                                             const WorkingDesign& design, const GlmSpec& ps_spec,
                                             const GlmSpec& or_spec,
                                             const SolverOptions& opt = {}) {
  return estimate_target_only(table, design, prepare_target(table, design, ps_spec, or_spec), opt);
}

struct FederatedOptions {
  bool strict = false;  // fail instead of dropping sources with failed flags
  SolverOptions solver;
};

struct FederatedEstimate {
  HteEstimate estimate;
  std::map<std::string, double> weights;
  std::vector<std::string> dropped;  // sources removed for failed fits
  std::vector<std::string> warnings;
  Vector p_total;
};

// Combines the target's own P_1 and Q_1 with remotely computed source
// aggregates. Source P_m are never refit here.
inline FederatedEstimate estimate_federated_from_state(const TargetState& target,
                                                       const std::vector<AugmentationVector>& sources,
                                                       const WorkingDesign& design,
                                                       const WeightScheme& scheme,
                                                       const FederatedOptions& opt = {}) {
  FederatedEstimate out;
  std::vector<AugmentationVector> kept;
  std::vector<std::pair<std::string, Eigen::Index>> kept_sizes;
  for (const auto& s : sources) {
    if (s.site_id == target.p1.site_id) {
      throw ConfigError("source site id '" + s.site_id + "' collides with the target");
    }
    if (s.p.size() != design.q()) {
      throw ConfigError("site '" + s.site_id + "' sent q = " + std::to_string(s.p.size()) +
                        ", design has q = " + std::to_string(design.q()));
    }
    if (!s.ok()) {
      if (opt.strict) {
        throw NumericalError("site '" + s.site_id + "' reported a failed nuisance or tilt fit");
      }
      out.dropped.push_back(s.site_id);
      out.warnings.push_back("dropped site '" + s.site_id +
                             "': nuisance or density-ratio fit did not converge");
      continue;
    }
    kept.push_back(s);
    kept_sizes.emplace_back(s.site_id, s.n);
  }
  WeightScheme effective = scheme;
  if (scheme.kind == WeightKind::explicit_weights && !out.dropped.empty()) {
    for (const auto& d : out.dropped) effective.explicit_weights.erase(d);
  }
  out.weights = resolve_weights(effective, target.p1.site_id, target.p1.n, kept_sizes);
  std::vector<AugmentationVector> all = kept;
  all.push_back(target.p1);
  out.p_total = combine_augmentations(all, out.weights);
  out.estimate = solve_beta(target.projection, out.p_total, std::nullopt, opt.solver);
  out.estimate.labels = design.labels();
  out.estimate.converged = out.estimate.converged && target.p1.nuisance_converged;
  for (const auto& d : out.dropped) out.weights[d] = 0.0;
  return out;
}

inline FederatedEstimate estimate_federated(const ObservationTable& target,
                                            const std::vector<AugmentationVector>& sources,
                                            const WorkingDesign& design, const WeightScheme& scheme,
                                            const GlmSpec& ps_spec, const GlmSpec& or_spec,
                                            const FederatedOptions& opt = {}) {
  return estimate_federated_from_state(prepare_target(target, design, ps_spec, or_spec), sources,
                                       design, scheme, opt);
}

}  // namespace fedhte
