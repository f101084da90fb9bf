#pragma once

#include "fedhte/error.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace fedhte {

enum class GlmFamily { bernoulli_logit, gaussian_identity };

inline std::string to_string(GlmFamily f) {
  return f == GlmFamily::bernoulli_logit ? "bernoulli_logit" : "gaussian_identity";
}

inline GlmFamily glm_family_from_string(const std::string& s) {
  if (s == "bernoulli_logit" || s == "logistic" || s == "binomial") return GlmFamily::bernoulli_logit;
  if (s == "gaussian_identity" || s == "linear" || s == "gaussian") return GlmFamily::gaussian_identity;
  throw ConfigError("unknown GLM family '" + s + "'");
}

// Working form of a propensity score or outcome regression model. With
// treatment terms enabled the predictor row is (1, A, X', A X')'.
struct GlmSpec {
  GlmFamily family = GlmFamily::bernoulli_logit;
  std::vector<std::string> predictor_columns;
  bool include_intercept = true;
  bool include_treatment_main_and_interactions = false;

  Eigen::Index dimension() const {
    const auto k = static_cast<Eigen::Index>(predictor_columns.size());
    return (include_intercept ? 1 : 0) + k +
           (include_treatment_main_and_interactions ? 1 + k : 0);
  }

  std::vector<std::string> column_labels() const {
    std::vector<std::string> out;
    if (include_intercept) out.emplace_back("(Intercept)");
    if (include_treatment_main_and_interactions) out.emplace_back("A");
    for (const auto& c : predictor_columns) out.push_back(c);
    if (include_treatment_main_and_interactions) {
      for (const auto& c : predictor_columns) out.push_back("A:" + c);
    }
    return out;
  }

  friend bool operator==(const GlmSpec&, const GlmSpec&) = default;
};

struct NuisanceFit {
  Vector coefficients;
  GlmSpec spec;
  bool converged = false;
  int iterations = 0;
  double deviance = 0.0;
  bool separation = false;     // |coefficients| diverged past the separation bound
  bool ridge_applied = false;  // weighted Gram was singular; 1e-8 I was added once
  bool fixed = false;          // supplied by the caller rather than estimated

  // A known model (e.g. a randomized design's propensity) that inference must
  // not treat as estimated.
  static NuisanceFit known(GlmSpec spec, Vector coefficients) {
    NuisanceFit f;
    f.spec = std::move(spec);
    f.coefficients = std::move(coefficients);
    f.converged = true;
    f.fixed = true;
    return f;
  }
};

// Predictor matrix of `spec` on `table`. When `treatment_level` is set, A is
// replaced by that constant (counterfactual evaluation).
inline Matrix glm_design(const ObservationTable& table, const GlmSpec& spec,
                         std::optional<int> treatment_level = std::nullopt) {
  const auto cols = table.column_indices(spec.predictor_columns);
  const Eigen::Index n = table.n();
  const auto k = static_cast<Eigen::Index>(cols.size());
  Matrix z(n, spec.dimension());
  Eigen::Index c = 0;
  if (spec.include_intercept) z.col(c++).setOnes();
  Vector a;
  if (spec.include_treatment_main_and_interactions) {
    a = treatment_level ? Vector::Constant(n, static_cast<double>(*treatment_level))
                        : table.treatment();
    z.col(c++) = a;
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    z.col(c++) = table.covariates().col(cols[static_cast<std::size_t>(j)]);
  }
  if (spec.include_treatment_main_and_interactions) {
    for (Eigen::Index j = 0; j < k; ++j) {
      z.col(c++) = a.cwiseProduct(table.covariates().col(cols[static_cast<std::size_t>(j)]));
    }
  }
  return z;
}

struct IrlsOptions {
  int max_iterations = 100;
  double score_tolerance = 1e-8;  // per observation
  double separation_bound = 30.0;
  int max_halvings = 30;
  bool check_rank = true;
};

namespace detail {

inline double log1pexp(double x) noexcept {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Log-likelihood at linear predictor `eta`, filling `mu` with the fitted
// probabilities on the way. Uses log(1 + e^t) = -log(mu) for t > 0 and
// -log1p(-mu) otherwise, so each row costs one exp and one log.
inline double logistic_loglik(const Vector& eta, const Vector& y, Vector& mu) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double t = eta[i];
    const double m = expit(t);
    mu[i] = m;
    const double softplus = t > 0.0 ? t - std::log(m) : -std::log1p(-m);
    ll += y[i] * t - softplus;
  }
  return ll;
}

inline double logistic_loglik(const Matrix& x, const Vector& y, const Vector& gamma) {
  Vector mu(x.rows());
  return logistic_loglik(Vector(x * gamma), y, mu);
}

// Every column taking part in a linear dependency (nonzero in a null-space
// vector of x).
inline std::string describe_dependent_columns(const Matrix& x,
                                              const std::vector<std::string>& names) {
  Eigen::FullPivLU<Matrix> lu(x);
  const Matrix kernel = lu.kernel();
  std::vector<bool> involved(static_cast<std::size_t>(x.cols()), false);
  for (Eigen::Index c = 0; c < kernel.cols(); ++c) {
    const double scale = kernel.col(c).cwiseAbs().maxCoeff();
    if (!(scale > 0.0)) continue;
    for (Eigen::Index j = 0; j < kernel.rows(); ++j) {
      if (std::abs(kernel(j, c)) > 1e-8 * scale) involved[static_cast<std::size_t>(j)] = true;
    }
  }
  std::string out;
  for (std::size_t j = 0; j < involved.size(); ++j) {
    if (!involved[j]) continue;
    if (!out.empty()) out += ", ";
    out += j < names.size() ? names[j] : "column " + std::to_string(j);
  }
  return out.empty() ? "(numerically dependent)" : out;
}

inline void require_full_rank(const Matrix& x, const std::vector<std::string>& names) {
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  if (qr.rank() < x.cols()) {
    throw DataError("rank-deficient design; dependent columns: " +
                    describe_dependent_columns(x, names));
  }
}

}  // namespace detail

// Maximum likelihood logistic regression by IRLS with step-halving on the
// log-likelihood.
inline NuisanceFit fit_logistic(const Matrix& x, const Vector& y, const IrlsOptions& opt = {},
                                const std::vector<std::string>& column_names = {},
                                std::optional<Vector> start = std::nullopt) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (y.size() != n) throw DataError("fit_logistic: label length does not match rows");
  if (n < d) {
    throw DataError("fit_logistic: n = " + std::to_string(n) + " < d = " + std::to_string(d));
  }
  if (opt.check_rank) detail::require_full_rank(x, column_names);

  NuisanceFit fit;
  Vector gamma = start ? *start : Vector::Zero(d);
  Vector mu(n);
  double ll = detail::logistic_loglik(Vector(x * gamma), y, mu);
  const double tol = opt.score_tolerance * static_cast<double>(n);
  Matrix h(d, d);
  Matrix xw(n, d);
  Vector mu_cand(n);
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Vector score = x.transpose() * (y - mu);
    fit.iterations = it;
    if (score.cwiseAbs().maxCoeff() < tol) {
      fit.converged = true;
      break;
    }
    xw = x.array().colwise() * (mu.array() * (1.0 - mu.array()));
    h.noalias() = x.transpose() * xw;
    Eigen::LDLT<Matrix> ldlt(h);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
      if (fit.ridge_applied) break;
      fit.ridge_applied = true;
      Matrix hr = h;
      hr.diagonal().array() += 1e-8;
      ldlt.compute(hr);
    }
    const Vector step = ldlt.solve(score);
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k <= opt.max_halvings; ++k) {
      const Vector cand = gamma + t * step;
      const double ll_new = detail::logistic_loglik(Vector(x * cand), y, mu_cand);
      if (std::isfinite(ll_new) && ll_new >= ll - 1e-12 * std::abs(ll)) {
        gamma = cand;
        ll = ll_new;
        mu.swap(mu_cand);
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    fit.iterations = it + 1;
    if (!accepted) break;
    if (gamma.norm() > opt.separation_bound) {
      fit.separation = true;
      break;
    }
  }
  fit.coefficients = gamma;
  fit.deviance = -2.0 * ll;
  if (fit.converged && !gamma.allFinite()) fit.converged = false;
  return fit;
}

// Least squares via column-pivoted QR.
inline NuisanceFit fit_linear(const Matrix& x, const Vector& y,
                              const std::vector<std::string>& column_names = {}) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (y.size() != n) throw DataError("fit_linear: response length does not match rows");
  if (n < d) {
    throw DataError("fit_linear: n = " + std::to_string(n) + " < d = " + std::to_string(d));
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  if (qr.rank() < d) {
    throw DataError("rank-deficient design; dependent columns: " +
                    detail::describe_dependent_columns(x, column_names));
  }
  NuisanceFit fit;
  fit.coefficients = qr.solve(y);
  fit.deviance = (y - x * fit.coefficients).squaredNorm();
  fit.converged = fit.coefficients.allFinite();
  fit.iterations = 1;
  return fit;
}

// Propensity model: regress A on the spec's predictors.
inline NuisanceFit fit_ps(const ObservationTable& table, const GlmSpec& spec,
                          const IrlsOptions& opt = {}, std::optional<Vector> start = std::nullopt) {
  if (spec.family != GlmFamily::bernoulli_logit) {
    throw ConfigError("propensity model must use the bernoulli_logit family");
  }
  if (spec.include_treatment_main_and_interactions) {
    throw ConfigError("propensity model cannot include treatment terms");
  }
  NuisanceFit fit = fit_logistic(glm_design(table, spec), table.treatment(), opt,
                                 spec.column_labels(), std::move(start));
  fit.spec = spec;
  return fit;
}

// Outcome regression: regress Y on the spec's predictors (usually with A and
// A x X terms).
inline NuisanceFit fit_or(const ObservationTable& table, const GlmSpec& spec,
                          const IrlsOptions& opt = {}, std::optional<Vector> start = std::nullopt) {
  const Matrix z = glm_design(table, spec);
  NuisanceFit fit;
  if (spec.family == GlmFamily::bernoulli_logit) {
    if (!table.outcome_is_binary()) {
      throw DataError("site '" + table.site_id() + "': logistic outcome model needs a 0/1 outcome");
    }
    fit = fit_logistic(z, table.outcome(), opt, spec.column_labels(), std::move(start));
  } else {
    fit = fit_linear(z, table.outcome(), spec.column_labels());
  }
  fit.spec = spec;
  return fit;
}

// pi(a, X_i) for every row. `clip`, when set, bounds probabilities to
// [clip, 1 - clip].
inline Vector predict_ps(const NuisanceFit& fit, const ObservationTable& table, int a,
                         std::optional<double> clip = std::nullopt) {
  if (fit.spec.family != GlmFamily::bernoulli_logit ||
      fit.spec.include_treatment_main_and_interactions) {
    throw ConfigError("predict_ps: fit is not a propensity model");
  }
  const Vector eta = glm_design(table, fit.spec) * fit.coefficients;
  Vector out(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double p1 = expit(eta[i]);
    double p = (a == 1) ? p1 : 1.0 - p1;
    if (clip) p = std::clamp(p, *clip, 1.0 - *clip);
    out[i] = p;
  }
  return out;
}

// g(a, X_i) for every row, regardless of the observed treatment.
inline Vector predict_or(const NuisanceFit& fit, const ObservationTable& table, int a) {
  const Vector eta = glm_design(table, fit.spec, a) * fit.coefficients;
  if (fit.spec.family == GlmFamily::gaussian_identity) return eta;
  return eta.unaryExpr([](double v) { return expit(v); });
}

// g(A_i, X_i) at each row's observed treatment.
inline Vector predict_or_observed(const NuisanceFit& fit, const ObservationTable& table) {
  const Vector eta = glm_design(table, fit.spec) * fit.coefficients;
  if (fit.spec.family == GlmFamily::gaussian_identity) return eta;
  return eta.unaryExpr([](double v) { return expit(v); });
}

}  // namespace fedhte
