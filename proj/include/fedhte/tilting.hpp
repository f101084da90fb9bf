#pragma once

#include "fedhte/error.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace fedhte {

// Features r(X) of the exponential tilt tau(X) = exp(alpha' r(X)). The same
// features are used on both sides of the moment equations. With
// normalization a constant 1 is prepended so the fitted ratio averages to
// one over the source sample.
struct TiltSpec {
  std::vector<std::string> r_columns;
  bool include_normalization = true;

  Eigen::Index dimension() const {
    return static_cast<Eigen::Index>(r_columns.size()) + (include_normalization ? 1 : 0);
  }

  friend bool operator==(const TiltSpec&, const TiltSpec&) = default;
};

struct TiltFit {
  Vector alpha;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;  // max-norm of the moment gap at alpha
  double max_weight = 0.0;
  double ess = 0.0;  // Kish effective sample size (sum w)^2 / sum w^2
  double ess_ratio = 0.0;
  std::string diagnostic;

  // A fit that reweights nothing; used by the untilted (naive) estimator.
  static TiltFit identity(Eigen::Index dim, Eigen::Index n) {
    TiltFit f;
    f.alpha = Vector::Zero(dim);
    f.converged = true;
    f.max_weight = 1.0;
    f.ess = static_cast<double>(n);
    f.ess_ratio = 1.0;
    return f;
  }
};

struct TiltOptions {
  int max_iterations = 100;
  double tolerance = 1e-8;
  int max_halvings = 40;
  double ess_warning_ratio = 0.1;
};

inline Matrix tilt_features(const ObservationTable& table, const TiltSpec& spec) {
  if (spec.r_columns.empty()) throw ConfigError("tilt spec needs at least one r column");
  const auto cols = table.column_indices(spec.r_columns);
  Matrix r(table.n(), spec.dimension());
  Eigen::Index c = 0;
  if (spec.include_normalization) r.col(c++).setOnes();
  for (auto j : cols) r.col(c++) = table.covariates().col(j);
  return r;
}

// Sample mean of the tilt features over the target rows; this vector is what
// the target shares with every source.
inline Vector target_moments(const ObservationTable& table, const TiltSpec& spec) {
  const Matrix r = tilt_features(table, spec);
  return r.colwise().sum().transpose() / static_cast<double>(r.rows());
}

inline Vector tilt_weights(const Matrix& features, const Vector& alpha) {
  return (features * alpha).array().exp().matrix();
}

inline Vector tilt_weights(const ObservationTable& source, const TiltSpec& spec,
                           const Vector& alpha) {
  return tilt_weights(tilt_features(source, spec), alpha);
}

// (1/n) sum r(x_i) tau(x_i): the source side of the moment equations.
inline Vector tilted_moments(const Matrix& features, const Vector& alpha) {
  const Vector w = tilt_weights(features, alpha);
  return features.transpose() * w / static_cast<double>(features.rows());
}

// Jacobian of tilted_moments with respect to alpha.
inline Matrix tilted_moments_jacobian(const Matrix& features, const Vector& alpha) {
  const Vector w = tilt_weights(features, alpha);
  const Matrix rw = features.array().colwise() * w.array();
  return features.transpose() * rw / static_cast<double>(features.rows());
}

// Newton's method on alpha -> tilted_moments(alpha) - target, started at
// alpha = 0 unless a start is given, with step-halving on the residual norm.
inline TiltFit fit_tilt(const Matrix& r, const Vector& target, const TiltOptions& opt = {},
                        std::optional<Vector> start = std::nullopt,
                        const std::string& site_id = {}) {
  const Eigen::Index d = r.cols();
  if (target.size() != d) {
    throw ConfigError("target moment vector has length " + std::to_string(target.size()) +
                      ", tilt features have " + std::to_string(d));
  }
  if (r.rows() < d) {
    throw DataError("site '" + site_id + "': too few rows to fit the density ratio");
  }
  const double n = static_cast<double>(r.rows());

  TiltFit fit;
  Vector alpha = (start && start->size() == d) ? *start : Vector::Zero(d);
  Vector w = tilt_weights(r, alpha);
  auto gap = [&](const Vector& weights) -> Vector { return r.transpose() * weights / n - target; };
  Vector g = gap(w);
  double merit = g.norm();
  for (int it = 0; it < opt.max_iterations; ++it) {
    fit.iterations = it;
    if (g.cwiseAbs().maxCoeff() < opt.tolerance) {
      fit.converged = true;
      break;
    }
    const Matrix rw = r.array().colwise() * w.array();
    const Matrix jac = r.transpose() * rw / n;
    Eigen::LDLT<Matrix> ldlt(jac);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      fit.diagnostic = "singular moment Jacobian (collinear tilt features)";
      break;
    }
    const Vector step = -ldlt.solve(g);
    if (!step.allFinite()) {
      fit.diagnostic = "singular moment Jacobian (collinear tilt features)";
      break;
    }
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k <= opt.max_halvings; ++k) {
      const Vector cand = alpha + t * step;
      Vector w_new = tilt_weights(r, cand);
      const Vector g_new = gap(w_new);
      const double m_new = g_new.norm();
      if (g_new.allFinite() && m_new < merit) {
        alpha = cand;
        w.swap(w_new);
        g = g_new;
        merit = m_new;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    fit.iterations = it + 1;
    if (!accepted) {
      fit.diagnostic = "line search stalled";
      break;
    }
  }
  if (!fit.converged && g.cwiseAbs().maxCoeff() < opt.tolerance) fit.converged = true;

  fit.alpha = alpha;
  fit.residual = g.cwiseAbs().maxCoeff();
  fit.max_weight = w.maxCoeff();
  fit.ess = w.sum() * w.sum() / w.squaredNorm();
  fit.ess_ratio = fit.ess / n;
  if (!fit.converged) {
    if (fit.diagnostic.empty()) fit.diagnostic = "no convergence within iteration limit";
    fit.diagnostic += "; residual " + std::to_string(fit.residual) +
                      "; target moments may lie outside the convex hull of the source "
                      "features (source covariate support does not cover the target)";
  } else if (fit.ess_ratio < opt.ess_warning_ratio) {
    fit.diagnostic = "effective sample size " + std::to_string(fit.ess) + " is below " +
                     std::to_string(opt.ess_warning_ratio) + " of n";
  }
  return fit;
}

inline TiltFit fit_tilt(const ObservationTable& source, const Vector& target, const TiltSpec& spec,
                        const TiltOptions& opt = {}, std::optional<Vector> start = std::nullopt) {
  return fit_tilt(tilt_features(source, spec), target, opt, std::move(start), source.site_id());
}

}  // namespace fedhte
