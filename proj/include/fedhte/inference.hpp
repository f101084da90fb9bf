#pragma once

#include "fedhte/dr_solver.hpp"
#include "fedhte/error.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/tilting.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fedhte {

struct BootstrapPlan {
  int B = 500;
  std::uint64_t seed = 0;
};

struct BootstrapSummary {
  Vector se;
  Vector ci_lower;  // percentile 2.5%
  Vector ci_upper;  // percentile 97.5%
  Matrix replicates;  // converged replicates only, one per row
  int failures = 0;
  std::vector<int> failed;  // 1-based replicate indices
};

// Replicate estimator: receives the replicate index b (1-based) and the
// plan's base seed, returns the estimate on that resample.
using ReplicateEstimator = std::function<HteEstimate(int b, std::uint64_t base_seed)>;

inline BootstrapSummary summarize_replicates(const std::vector<std::optional<Vector>>& reps,
                                             Eigen::Index q) {
  BootstrapSummary s;
  std::vector<Vector> ok;
  for (std::size_t b = 0; b < reps.size(); ++b) {
    if (reps[b] && reps[b]->allFinite()) {
      ok.push_back(*reps[b]);
    } else {
      ++s.failures;
      s.failed.push_back(static_cast<int>(b) + 1);
    }
  }
  s.replicates.resize(static_cast<Eigen::Index>(ok.size()), q);
  for (std::size_t r = 0; r < ok.size(); ++r) {
    s.replicates.row(static_cast<Eigen::Index>(r)) = ok[r].transpose();
  }
  s.se = column_sd(s.replicates);
  s.ci_lower.resize(q);
  s.ci_upper.resize(q);
  for (Eigen::Index j = 0; j < q; ++j) {
    std::vector<double> col(s.replicates.col(j).data(),
                            s.replicates.col(j).data() + s.replicates.rows());
    s.ci_lower[j] = quantile(col, 0.025);
    s.ci_upper[j] = quantile(col, 0.975);
  }
  return s;
}

inline void check_failure_rate(const BootstrapSummary& s, int B) {
  if (s.failures * 5 > B) {
    std::string which;
    for (std::size_t k = 0; k < s.failed.size() && k < 10; ++k) {
      which += (k ? "," : "") + std::to_string(s.failed[k]);
    }
    throw NumericalError(std::to_string(s.failures) + " of " + std::to_string(B) +
                         " bootstrap replicates failed (limit 20%); first failures: " + which);
  }
}

inline BootstrapSummary bootstrap_se(const ReplicateEstimator& estimator, const BootstrapPlan& plan) {
  if (plan.B < 2) throw ConfigError("bootstrap needs B >= 2, got " + std::to_string(plan.B));
  std::vector<std::optional<Vector>> reps(static_cast<std::size_t>(plan.B));
  Eigen::Index q = -1;
  for (int b = 1; b <= plan.B; ++b) {
    try {
      HteEstimate e = estimator(b, plan.seed);
      if (q < 0) q = e.beta.size();
      if (e.converged) reps[static_cast<std::size_t>(b - 1)] = e.beta;
    } catch (const NumericalError&) {
    } catch (const DataError&) {
    }
  }
  if (q < 0) throw NumericalError("every bootstrap replicate failed");
  BootstrapSummary s = summarize_replicates(reps, q);
  check_failure_rate(s, plan.B);
  return s;
}

// ---------------------------------------------------------------------------
// Sandwich variance

namespace detail {

// Derivative of 1/pi(A_i, x_i) with respect to the propensity coefficients is
// c_i z_i with c_i returned here.
inline double inv_pi_derivative_factor(bool treated, double pi1) {
  return treated ? -(1.0 - pi1) / pi1 : pi1 / (1.0 - pi1);
}

struct NuisancePieces {
  Matrix z_ps;       // n x d_ps
  Vector pi1;
  Matrix w_or_obs;   // OR design at the observed A
  Matrix w_or0, w_or1;
  Vector g0, g1;
  Vector dg0, dg1;   // d mean / d linear predictor for each arm
  Vector dg_obs;
};

inline NuisancePieces nuisance_pieces(const ObservationTable& t, const NuisanceFit& ps,
                                      const NuisanceFit& or_fit) {
  NuisancePieces np;
  np.z_ps = glm_design(t, ps.spec);
  np.pi1 = predict_ps(ps, t, 1);
  np.w_or_obs = glm_design(t, or_fit.spec);
  np.w_or0 = glm_design(t, or_fit.spec, 0);
  np.w_or1 = glm_design(t, or_fit.spec, 1);
  np.g0 = predict_or(or_fit, t, 0);
  np.g1 = predict_or(or_fit, t, 1);
  const bool logistic = or_fit.spec.family == GlmFamily::bernoulli_logit;
  auto deriv = [logistic](const Vector& g) -> Vector {
    if (!logistic) return Vector::Ones(g.size());
    return (g.array() * (1.0 - g.array())).matrix();
  };
  np.dg0 = deriv(np.g0);
  np.dg1 = deriv(np.g1);
  np.dg_obs.resize(t.n());
  for (Eigen::Index i = 0; i < t.n(); ++i) {
    np.dg_obs[i] = t.treatment()[i] == 1.0 ? np.dg1[i] : np.dg0[i];
  }
  return np;
}

// Per-row influence of the PS coefficients: I^{-1} z_i (A_i - pi_i).
inline Matrix ps_influence(const ObservationTable& t, const NuisancePieces& np) {
  const double n = static_cast<double>(t.n());
  const Vector w = (np.pi1.array() * (1.0 - np.pi1.array())).matrix();
  const Matrix zw = np.z_ps.array().colwise() * w.array();
  const Matrix info = np.z_ps.transpose() * zw / n;
  Eigen::LDLT<Matrix> ldlt(info);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericalError("propensity information matrix is singular");
  }
  const Matrix score = np.z_ps.array().colwise() * (t.treatment() - np.pi1).array();
  return ldlt.solve(score.transpose()).transpose();
}

// Per-row influence of the OR coefficients: I^{-1} w_i (Y_i - g_i).
inline Matrix or_influence(const ObservationTable& t, const NuisancePieces& np) {
  const double n = static_cast<double>(t.n());
  const Matrix ww = np.w_or_obs.array().colwise() * np.dg_obs.array();
  const Matrix info = np.w_or_obs.transpose() * ww / n;
  Eigen::LDLT<Matrix> ldlt(info);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericalError("outcome-regression information matrix is singular");
  }
  Vector resid(t.n());
  for (Eigen::Index i = 0; i < t.n(); ++i) {
    resid[i] = t.outcome()[i] - (t.treatment()[i] == 1.0 ? np.g1[i] : np.g0[i]);
  }
  const Matrix score = np.w_or_obs.array().colwise() * resid.array();
  return ldlt.solve(score.transpose()).transpose();
}

// Mean derivative of the (optionally tilted) augmentation rows with respect
// to the PS coefficients, q x d_ps.
inline Matrix aug_ps_derivative(const ObservationTable& t, const DesignRows& rows,
                                const NuisancePieces& np, const Vector* tau) {
  const Eigen::Index n = t.n();
  Matrix g = Matrix::Zero(rows.arm0.cols(), np.z_ps.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool treated = t.treatment()[i] == 1.0;
    const double resid = t.outcome()[i] - (treated ? np.g1[i] : np.g0[i]);
    const double c = inv_pi_derivative_factor(treated, np.pi1[i]) * resid * (tau ? (*tau)[i] : 1.0);
    g.noalias() += (treated ? rows.arm1.row(i) : rows.arm0.row(i)).transpose() * (c * np.z_ps.row(i));
  }
  return g / static_cast<double>(n);
}

// Mean derivative of the augmentation rows with respect to the OR
// coefficients, q x d_or. Only the observed arm enters.
inline Matrix aug_or_derivative(const ObservationTable& t, const DesignRows& rows,
                                const NuisancePieces& np, const Vector* tau) {
  const Eigen::Index n = t.n();
  Matrix g = Matrix::Zero(rows.arm0.cols(), np.w_or_obs.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool treated = t.treatment()[i] == 1.0;
    const double pi = treated ? np.pi1[i] : 1.0 - np.pi1[i];
    const double c = -(tau ? (*tau)[i] : 1.0) / pi * np.dg_obs[i];
    g.noalias() += (treated ? rows.arm1.row(i) : rows.arm0.row(i)).transpose() *
                   (c * np.w_or_obs.row(i));
  }
  return g / static_cast<double>(n);
}

// Mean derivative of the Q rows with respect to the OR coefficients.
inline Matrix q_or_derivative(const DesignRows& rows, const NuisancePieces& np) {
  const Matrix a0 = np.w_or0.array().colwise() * np.dg0.array();
  const Matrix a1 = np.w_or1.array().colwise() * np.dg1.array();
  return (rows.arm0.transpose() * a0 + rows.arm1.transpose() * a1) /
         static_cast<double>(rows.arm0.rows());
}

}  // namespace detail

// Per-row influence contributions (n x q) of the target-only estimator,
// before multiplication by the inverse bread.
inline Matrix target_estimating_contributions(const ObservationTable& table,
                                              const WorkingDesign& design, const NuisanceFit& ps,
                                              const NuisanceFit& or_fit, const Vector& beta_hat,
                                              double p_weight = 1.0) {
  const DesignRows rows = build_design_rows(table, design);
  const OutcomeProjection proj(rows, predict_or(or_fit, table, 0), predict_or(or_fit, table, 1),
                               design.link());
  Matrix c = p_weight * augmentation_terms(table, rows, ps, or_fit, nullptr) + proj.terms(beta_hat);
  const detail::NuisancePieces np = detail::nuisance_pieces(table, ps, or_fit);
  if (!ps.fixed) {
    const Matrix g_ps = p_weight * detail::aug_ps_derivative(table, rows, np, nullptr);
    c.noalias() += detail::ps_influence(table, np) * g_ps.transpose();
  }
  if (!or_fit.fixed) {
    const Matrix g_or =
        p_weight * detail::aug_or_derivative(table, rows, np, nullptr) + detail::q_or_derivative(rows, np);
    c.noalias() += detail::or_influence(table, np) * g_or.transpose();
  }
  return c;
}

inline Matrix bread_inverse(const OutcomeProjection& proj, const Vector& beta_hat) {
  const Matrix t = -proj.jacobian(beta_hat);
  Eigen::LDLT<Matrix> ldlt(t);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericalError("bread matrix is singular");
  }
  return ldlt.solve(Matrix::Identity(t.rows(), t.cols()));
}

// Var(beta_hat) for the target-only estimator from the empirical influence
// function, including the first-order effect of estimating the nuisance
// models. Nuisances marked fixed contribute no correction.
inline Matrix sandwich_variance_target(const ObservationTable& table, const WorkingDesign& design,
                                       const NuisanceFit& ps, const NuisanceFit& or_fit,
                                       const Vector& beta_hat) {
  const OutcomeProjection proj = OutcomeProjection::from_fit(table, design, or_fit);
  const Matrix tinv = bread_inverse(proj, beta_hat);
  const Matrix c = target_estimating_contributions(table, design, ps, or_fit, beta_hat);
  const Matrix phi = c * tinv;  // rows phi_i'
  const double n = static_cast<double>(table.n());
  Matrix v = phi.transpose() * phi / (n * n);
  return 0.5 * (v + v.transpose());
}

// All-data-visible description of one source for the experimental federated
// sandwich.
struct InProcessSource {
  const ObservationTable* table = nullptr;
  NuisanceFit ps;
  NuisanceFit or_fit;
  TiltFit tilt;
  TiltSpec tilt_spec;
  double weight = 0.0;
};

// Experimental: Var(beta_hat) of the federated estimator, built from every
// site's rows. Never available over the wire. Sites are independent, so the
// meat is a sum of within-site centred outer products.
inline Matrix sandwich_variance_federated(const ObservationTable& target,
                                          const WorkingDesign& design, const NuisanceFit& ps,
                                          const NuisanceFit& or_fit, double target_weight,
                                          const std::vector<InProcessSource>& sources,
                                          const Vector& beta_hat) {
  const OutcomeProjection proj = OutcomeProjection::from_fit(target, design, or_fit);
  const Matrix tinv = bread_inverse(proj, beta_hat);
  const Eigen::Index q = design.q();
  Matrix c_target = target_estimating_contributions(target, design, ps, or_fit, beta_hat, target_weight);
  Matrix meat = Matrix::Zero(q, q);
  for (const auto& s : sources) {
    if (s.weight == 0.0) continue;
    const ObservationTable& t = *s.table;
    const DesignRows rows = build_design_rows(t, design);
    const Matrix r = tilt_features(t, s.tilt_spec);
    const Vector tau = tilt_weights(r, s.tilt.alpha);
    const Matrix p_rows = augmentation_terms(t, rows, s.ps, s.or_fit, &tau);
    const double nm = static_cast<double>(t.n());
    Matrix c = s.weight * p_rows;
    const detail::NuisancePieces np = detail::nuisance_pieces(t, s.ps, s.or_fit);
    if (!s.ps.fixed) {
      c.noalias() += detail::ps_influence(t, np) *
                     (s.weight * detail::aug_ps_derivative(t, rows, np, &tau)).transpose();
    }
    if (!s.or_fit.fixed) {
      c.noalias() += detail::or_influence(t, np) *
                     (s.weight * detail::aug_or_derivative(t, rows, np, &tau)).transpose();
    }
    // Density-ratio coefficients solve mean_m(r tau) = mean_1(r).
    const Matrix jac = tilted_moments_jacobian(r, s.tilt.alpha);
    Eigen::LDLT<Matrix> ldlt(jac);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw NumericalError("tilt Jacobian is singular for site '" + t.site_id() + "'");
    }
    const Matrix g_alpha = s.weight * p_rows.transpose() * r / nm;  // q x d
    const Matrix rtau = r.array().colwise() * tau.array();
    c.noalias() -= (ldlt.solve(rtau.transpose())).transpose() * g_alpha.transpose();
    const Matrix r1 = tilt_features(target, s.tilt_spec);
    c_target.noalias() += (ldlt.solve(r1.transpose())).transpose() * g_alpha.transpose();
    const Matrix cc = c.rowwise() - c.colwise().mean();
    meat.noalias() += cc.transpose() * cc / (nm * nm);
  }
  const double n1 = static_cast<double>(target.n());
  const Matrix ct = c_target.rowwise() - c_target.colwise().mean();
  meat.noalias() += ct.transpose() * ct / (n1 * n1);
  Matrix v = tinv * meat * tinv.transpose();
  return 0.5 * (v + v.transpose());
}

// ---------------------------------------------------------------------------
// Source selection

enum class SelectionRule { intersection, chi_square };

inline std::string to_string(SelectionRule r) {
  return r == SelectionRule::intersection ? "intersection" : "chi_square";
}

inline SelectionRule selection_rule_from_string(const std::string& s) {
  if (s == "intersection") return SelectionRule::intersection;
  if (s == "chi_square" || s == "chisq") return SelectionRule::chi_square;
  throw ConfigError("unknown selection rule '" + s + "'");
}

struct SelectionOptions {
  SelectionRule rule = SelectionRule::intersection;
  double z = kZ975;
  double level = 0.95;  // chi-square rule only
  double sd_scale = 1.0;
  SolverOptions solver;
};

struct SourceSelection {
  std::string site_id;
  Vector mean_delta;
  Vector sd_delta;
  Vector ci_lower;
  Vector ci_upper;
  double chi_square = std::nan("");
  int replicates_used = 0;
  int replicates_failed = 0;
  bool retained = false;
  std::string reason;
};

struct SelectionReport {
  std::vector<SourceSelection> sources;
  std::map<std::string, double> final_weights;
  std::vector<std::string> warnings;

  std::vector<std::string> excluded() const {
    std::vector<std::string> out;
    for (const auto& s : sources) {
      if (!s.retained) out.push_back(s.site_id);
    }
    return out;
  }
};

// The target's side of the paired bootstrap: one projection, one beta_1 and
// one moment row per replicate.
struct TargetBootstrap {
  std::string site_id;
  Eigen::Index n = 0;
  std::vector<OutcomeProjection> projections;
  std::vector<Vector> p1;
  Matrix beta;      // B x q
  std::vector<bool> ok;
  Matrix moments;   // B x d

  int B() const noexcept { return static_cast<int>(projections.size()); }
};

inline TargetBootstrap make_target_bootstrap(const ObservationTable& target,
                                             const WorkingDesign& design, const GlmSpec& ps_spec,
                                             const GlmSpec& or_spec, const TiltSpec& tilt_spec,
                                             const BootstrapPlan& plan,
                                             const SolverOptions& solver = {},
                                             const IrlsOptions& irls = {}) {
  if (plan.B < 1) throw ConfigError("bootstrap needs B >= 1");
  TargetBootstrap tb;
  tb.site_id = target.site_id();
  tb.n = target.n();
  tb.projections.resize(static_cast<std::size_t>(plan.B));
  tb.p1.resize(static_cast<std::size_t>(plan.B));
  tb.beta = Matrix::Constant(plan.B, design.q(), std::nan(""));
  tb.ok.assign(static_cast<std::size_t>(plan.B), false);
  tb.moments.resize(plan.B, tilt_spec.dimension());
  IrlsOptions fast = irls;
  fast.check_rank = false;
  for (int b = 1; b <= plan.B; ++b) {
    const auto idx = bootstrap_indices(target.n(), replicate_seed(plan.seed, target.site_id(),
                                                                  static_cast<std::uint64_t>(b)));
    const ObservationTable rb = target.resample(idx);
    const auto k = static_cast<std::size_t>(b - 1);
    tb.moments.row(b - 1) = target_moments(rb, tilt_spec).transpose();
    try {
      TargetState st = prepare_target(rb, design, fit_ps(rb, ps_spec, fast), fit_or(rb, or_spec, fast));
      HteEstimate e = solve_beta(st.projection, st.p1.p, std::nullopt, solver);
      tb.projections[k] = std::move(st.projection);
      tb.p1[k] = st.p1.p;
      if (e.converged && st.p1.nuisance_converged) {
        tb.beta.row(b - 1) = e.beta.transpose();
        tb.ok[k] = true;
      }
    } catch (const NumericalError&) {
    } catch (const DataError&) {
    }
  }
  return tb;
}

// Decides one source from its paired replicate differences.
inline SourceSelection evaluate_source(const std::string& site_id, const TargetBootstrap& tb,
                                       const std::vector<AugmentationVector>& replicates,
                                       const SelectionOptions& opt) {
  SourceSelection sel;
  sel.site_id = site_id;
  if (static_cast<int>(replicates.size()) != tb.B()) {
    throw ProtocolError("site '" + site_id + "' returned " + std::to_string(replicates.size()) +
                        " replicates, expected " + std::to_string(tb.B()));
  }
  std::vector<Vector> deltas;
  for (int b = 0; b < tb.B(); ++b) {
    const auto k = static_cast<std::size_t>(b);
    if (!tb.ok[k] || !replicates[k].ok()) {
      ++sel.replicates_failed;
      continue;
    }
    try {
      HteEstimate e = solve_beta(tb.projections[k], replicates[k].p, std::nullopt, opt.solver);
      if (!e.converged) {
        ++sel.replicates_failed;
        continue;
      }
      deltas.push_back(e.beta - tb.beta.row(b).transpose());
    } catch (const NumericalError&) {
      ++sel.replicates_failed;
    }
  }
  sel.replicates_used = static_cast<int>(deltas.size());
  if (deltas.size() < 2) {
    sel.retained = false;
    sel.reason = "all bootstrap replicates failed";
    return sel;
  }
  const Eigen::Index q = deltas.front().size();
  Matrix d(static_cast<Eigen::Index>(deltas.size()), q);
  for (std::size_t r = 0; r < deltas.size(); ++r) d.row(static_cast<Eigen::Index>(r)) = deltas[r].transpose();
  sel.mean_delta = d.colwise().mean().transpose();
  sel.sd_delta = column_sd(d) * opt.sd_scale;
  sel.ci_lower = sel.mean_delta - opt.z * sel.sd_delta;
  sel.ci_upper = sel.mean_delta + opt.z * sel.sd_delta;
  if (opt.rule == SelectionRule::intersection) {
    sel.retained = ((sel.ci_lower.array() <= 0.0) && (sel.ci_upper.array() >= 0.0)).all();
    if (!sel.retained) {
      std::string coords;
      for (Eigen::Index j = 0; j < q; ++j) {
        if (sel.ci_lower[j] > 0.0 || sel.ci_upper[j] < 0.0) {
          coords += (coords.empty() ? "" : ",") + std::to_string(j);
        }
      }
      sel.reason = "difference CI excludes 0 for coordinate(s) " + coords;
    }
  } else {
    const Matrix centred = d.rowwise() - d.colwise().mean();
    const Matrix s = centred.transpose() * centred / static_cast<double>(d.rows() - 1) *
                     (opt.sd_scale * opt.sd_scale);
    Eigen::LDLT<Matrix> ldlt(s);
    const boost::math::chi_squared_distribution<double> chi(static_cast<double>(q));
    const double crit = boost::math::quantile(chi, opt.level);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      sel.retained = false;
      sel.reason = "singular difference covariance";
    } else {
      sel.chi_square = sel.mean_delta.dot(ldlt.solve(sel.mean_delta));
      sel.retained = sel.chi_square <= crit;
      if (!sel.retained) sel.reason = "joint chi-square statistic above critical value";
    }
  }
  return sel;
}

// Applies the rule to every source and derives final weights over the
// retained sites. `replicates` maps site id to its B replicate aggregates.
inline SelectionReport select_from_replicates(
    const TargetBootstrap& tb, const std::map<std::string, std::vector<AugmentationVector>>& replicates,
    const std::map<std::string, Eigen::Index>& source_sizes, const WeightScheme& scheme,
    const SelectionOptions& opt = {}) {
  SelectionReport rep;
  if (tb.B() < 30) {
    rep.warnings.push_back("B = " + std::to_string(tb.B()) +
                           " < 30; selection intervals are unreliable");
  }
  std::vector<std::pair<std::string, Eigen::Index>> kept;
  for (const auto& [site, reps] : replicates) {
    SourceSelection sel = evaluate_source(site, tb, reps, opt);
    if (sel.retained) {
      auto it = source_sizes.find(site);
      if (it == source_sizes.end()) throw ConfigError("no sample size for site '" + site + "'");
      kept.emplace_back(site, it->second);
    }
    rep.sources.push_back(std::move(sel));
  }
  WeightScheme eff = scheme;
  if (scheme.kind == WeightKind::explicit_weights) {
    for (const auto& s : rep.sources) {
      if (!s.retained) eff.explicit_weights.erase(s.site_id);
    }
  }
  rep.final_weights = resolve_weights(eff, tb.site_id, tb.n, kept);
  for (const auto& s : rep.sources) {
    if (!s.retained) rep.final_weights[s.site_id] = 0.0;
  }
  return rep;
}

}  // namespace fedhte
