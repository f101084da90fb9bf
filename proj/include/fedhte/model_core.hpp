#pragma once

#include "fedhte/error.hpp"
#include "fedhte/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace fedhte {

enum class LinkKind { identity, log, logit };

inline std::string to_string(LinkKind k) {
  switch (k) {
    case LinkKind::identity: return "identity";
    case LinkKind::log: return "log";
    case LinkKind::logit: return "logit";
  }
  return "?";
}

inline LinkKind link_kind_from_string(const std::string& s) {
  if (s == "identity") return LinkKind::identity;
  if (s == "log") return LinkKind::log;
  if (s == "logit") return LinkKind::logit;
  throw ConfigError("unknown link '" + s + "' (expected identity, log or logit)");
}

// l(.) in the working structural model together with its inverse and the
// derivative of the inverse.
class LinkFunction {
 public:
  constexpr explicit LinkFunction(LinkKind kind = LinkKind::logit) noexcept : kind_(kind) {}

  constexpr LinkKind kind() const noexcept { return kind_; }

  double forward(double mu) const noexcept {
    switch (kind_) {
      case LinkKind::identity: return mu;
      case LinkKind::log: return std::log(mu);
      case LinkKind::logit: return logit(mu);
    }
    return mu;
  }

  double inverse(double eta) const noexcept {
    switch (kind_) {
      case LinkKind::identity: return eta;
      case LinkKind::log: return std::exp(eta);
      case LinkKind::logit: return expit(eta);
    }
    return eta;
  }

  double inverse_derivative(double eta) const noexcept {
    switch (kind_) {
      case LinkKind::identity: return 1.0;
      case LinkKind::log: return std::exp(eta);
      case LinkKind::logit: {
        const double p = expit(eta);
        return p * (1.0 - p);
      }
    }
    return 1.0;
  }

  // Binary outcomes are required for logit; identity and log accept any
  // finite value.
  bool requires_binary_outcome() const noexcept { return kind_ == LinkKind::logit; }

  friend bool operator==(LinkFunction a, LinkFunction b) noexcept { return a.kind_ == b.kind_; }

 private:
  LinkKind kind_;
};

// One site's rectangular dataset: outcome Y, binary treatment A, covariates X
// (column-major, named) and the designated effect-modifier subset.
class ObservationTable {
 public:
  ObservationTable() = default;

  ObservationTable(std::string site_id, Vector outcome, Vector treatment, Matrix covariates,
                   std::vector<std::string> covariate_names,
                   std::vector<Eigen::Index> modifier_columns)
      : site_id_(std::move(site_id)),
        outcome_(std::move(outcome)),
        treatment_(std::move(treatment)),
        covariates_(std::move(covariates)),
        covariate_names_(std::move(covariate_names)),
        modifier_columns_(std::move(modifier_columns)) {
    validate();
  }

  const std::string& site_id() const noexcept { return site_id_; }
  Eigen::Index n() const noexcept { return outcome_.size(); }
  Eigen::Index p() const noexcept { return covariates_.cols(); }
  const Vector& outcome() const noexcept { return outcome_; }
  const Vector& treatment() const noexcept { return treatment_; }
  const Matrix& covariates() const noexcept { return covariates_; }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
  const std::vector<Eigen::Index>& modifier_columns() const noexcept { return modifier_columns_; }

  std::vector<std::string> modifier_names() const {
    std::vector<std::string> out;
    for (auto c : modifier_columns_) out.push_back(covariate_names_[static_cast<std::size_t>(c)]);
    return out;
  }

  bool has_column(const std::string& name) const {
    return std::find(covariate_names_.begin(), covariate_names_.end(), name) !=
           covariate_names_.end();
  }

  Eigen::Index column_index(const std::string& name) const {
    auto it = std::find(covariate_names_.begin(), covariate_names_.end(), name);
    if (it == covariate_names_.end()) {
      throw ConfigError("site '" + site_id_ + "': no covariate column named '" + name + "'");
    }
    return static_cast<Eigen::Index>(it - covariate_names_.begin());
  }

  std::vector<Eigen::Index> column_indices(const std::vector<std::string>& names) const {
    std::vector<Eigen::Index> out;
    out.reserve(names.size());
    for (const auto& nm : names) out.push_back(column_index(nm));
    return out;
  }

  bool outcome_is_binary() const {
    return (outcome_.array() == 0.0 || outcome_.array() == 1.0).all();
  }

  // Table made of the given rows (duplicates allowed); used for bootstrap
  // replicates.
  ObservationTable resample(const std::vector<Eigen::Index>& rows) const {
    const auto m = static_cast<Eigen::Index>(rows.size());
    Vector y(m), a(m);
    Matrix x(m, covariates_.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto r = rows[static_cast<std::size_t>(i)];
      y[i] = outcome_[r];
      a[i] = treatment_[r];
    }
    for (Eigen::Index j = 0; j < covariates_.cols(); ++j) {
      const double* src = covariates_.col(j).data();
      double* dst = x.col(j).data();
      for (Eigen::Index i = 0; i < m; ++i) dst[i] = src[rows[static_cast<std::size_t>(i)]];
    }
    ObservationTable out;
    out.site_id_ = site_id_;
    out.outcome_ = std::move(y);
    out.treatment_ = std::move(a);
    out.covariates_ = std::move(x);
    out.covariate_names_ = covariate_names_;
    out.modifier_columns_ = modifier_columns_;
    return out;
  }

  ObservationTable with_site_id(std::string id) const {
    ObservationTable out = *this;
    out.site_id_ = std::move(id);
    return out;
  }

  // Same data with the modifier set X~ redesignated by column name.
  ObservationTable with_modifiers(const std::vector<std::string>& names) const {
    ObservationTable out = *this;
    out.modifier_columns_ = column_indices(names);
    out.validate();
    return out;
  }

  ObservationTable with_outcome(Vector y) const {
    return ObservationTable(site_id_, std::move(y), treatment_, covariates_, covariate_names_,
                            modifier_columns_);
  }

 private:
  void validate() const {
    const Eigen::Index n = outcome_.size();
    if (n < 1) {
      throw DataError("site '" + site_id_ + "': n >= 1 violated (empty table)");
    }
    if (treatment_.size() != n || covariates_.rows() != n) {
      throw DataError("site '" + site_id_ + "': column lengths differ");
    }
    if (static_cast<Eigen::Index>(covariate_names_.size()) != covariates_.cols()) {
      throw DataError("site '" + site_id_ + "': covariate name count does not match columns");
    }
    std::set<std::string> names(covariate_names_.begin(), covariate_names_.end());
    if (names.size() != covariate_names_.size()) {
      throw DataError("site '" + site_id_ + "': duplicate covariate names");
    }
    std::set<Eigen::Index> seen;
    for (auto c : modifier_columns_) {
      if (c < 0 || c >= covariates_.cols()) {
        throw DataError("site '" + site_id_ + "': modifier column index out of range");
      }
      if (!seen.insert(c).second) {
        throw DataError("site '" + site_id_ + "': duplicate modifier column");
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!std::isfinite(outcome_[i])) {
        throw DataError("site '" + site_id_ + "': non-finite outcome in row " + std::to_string(i + 1));
      }
      if (treatment_[i] != 0.0 && treatment_[i] != 1.0) {
        throw DataError("site '" + site_id_ + "': treatment not in {0,1} in row " +
                        std::to_string(i + 1));
      }
      for (Eigen::Index j = 0; j < covariates_.cols(); ++j) {
        if (!std::isfinite(covariates_(i, j))) {
          throw DataError("site '" + site_id_ + "': non-finite value in row " +
                          std::to_string(i + 1) + ", column '" +
                          covariate_names_[static_cast<std::size_t>(j)] + "'");
        }
      }
    }
  }

  std::string site_id_;
  Vector outcome_;
  Vector treatment_;
  Matrix covariates_;
  std::vector<std::string> covariate_names_;
  std::vector<Eigen::Index> modifier_columns_;
};

enum class BasisKind { linear_interaction, custom };

// eta(x~, a): maps a modifier vector and a treatment level to q basis values.
using BasisFunction = std::function<Vector(const Vector& modifiers, int a)>;

// Working structural model l{E(Y(a) | X~)} = eta(X~, a)' beta.
class WorkingDesign {
 public:
  // The default basis (1, a, x~', a x~')'.
  static WorkingDesign standard(LinkFunction link, std::vector<std::string> modifier_names) {
    WorkingDesign d;
    d.kind_ = BasisKind::linear_interaction;
    d.link_ = link;
    d.arity_ = static_cast<Eigen::Index>(modifier_names.size());
    d.q_ = 2 * (1 + d.arity_);
    d.labels_ = {"(Intercept)", "A"};
    for (const auto& m : modifier_names) d.labels_.push_back(m);
    for (const auto& m : modifier_names) d.labels_.push_back("A:" + m);
    d.modifier_names_ = std::move(modifier_names);
    return d;
  }

  static WorkingDesign custom(LinkFunction link, std::vector<std::string> modifier_names,
                              std::vector<std::string> labels, BasisFunction basis) {
    WorkingDesign d;
    d.kind_ = BasisKind::custom;
    d.link_ = link;
    d.arity_ = static_cast<Eigen::Index>(modifier_names.size());
    d.q_ = static_cast<Eigen::Index>(labels.size());
    d.labels_ = std::move(labels);
    d.modifier_names_ = std::move(modifier_names);
    d.basis_ = std::move(basis);
    return d;
  }

  BasisKind basis_kind() const noexcept { return kind_; }
  const LinkFunction& link() const noexcept { return link_; }
  Eigen::Index q() const noexcept { return q_; }
  Eigen::Index arity() const noexcept { return arity_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<std::string>& modifier_names() const noexcept { return modifier_names_; }

  Vector basis(const Vector& modifiers, int a) const {
    if (modifiers.size() != arity_) {
      throw ConfigError("basis arity mismatch: design expects " + std::to_string(arity_) +
                        " modifiers, got " + std::to_string(modifiers.size()));
    }
    if (kind_ == BasisKind::custom) {
      Vector out = basis_(modifiers, a);
      if (out.size() != q_) {
        throw ConfigError("custom basis returned " + std::to_string(out.size()) +
                          " values, expected " + std::to_string(q_));
      }
      return out;
    }
    Vector out(q_);
    out[0] = 1.0;
    out[1] = static_cast<double>(a);
    out.segment(2, arity_) = modifiers;
    out.segment(2 + arity_, arity_) = static_cast<double>(a) * modifiers;
    return out;
  }

 private:
  BasisKind kind_ = BasisKind::linear_interaction;
  LinkFunction link_{LinkKind::logit};
  Eigen::Index q_ = 2;
  Eigen::Index arity_ = 0;
  std::vector<std::string> labels_;
  std::vector<std::string> modifier_names_;
  BasisFunction basis_;
};

// Basis rows for every subject under both treatment levels.
struct DesignRows {
  Matrix arm0;  // n x q, eta(x~_i, 0)
  Matrix arm1;  // n x q, eta(x~_i, 1)

  const Matrix& arm(int a) const noexcept { return a == 0 ? arm0 : arm1; }
};

inline DesignRows build_design_rows(const ObservationTable& table, const WorkingDesign& design) {
  const auto& mods = table.modifier_columns();
  if (static_cast<Eigen::Index>(mods.size()) != design.arity()) {
    throw ConfigError("site '" + table.site_id() + "': table designates " +
                      std::to_string(mods.size()) + " modifier columns but the design expects " +
                      std::to_string(design.arity()));
  }
  const Eigen::Index n = table.n();
  const Eigen::Index q = design.q();
  DesignRows rows{Matrix(n, q), Matrix(n, q)};
  if (design.basis_kind() == BasisKind::linear_interaction) {
    const Eigen::Index k = design.arity();
    rows.arm0.col(0).setOnes();
    rows.arm1.col(0).setOnes();
    rows.arm0.col(1).setZero();
    rows.arm1.col(1).setOnes();
    for (Eigen::Index j = 0; j < k; ++j) {
      const auto& x = table.covariates().col(mods[static_cast<std::size_t>(j)]);
      rows.arm0.col(2 + j) = x;
      rows.arm1.col(2 + j) = x;
      rows.arm0.col(2 + k + j).setZero();
      rows.arm1.col(2 + k + j) = x;
    }
    return rows;
  }
  Vector xt(design.arity());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < design.arity(); ++j) {
      xt[j] = table.covariates()(i, mods[static_cast<std::size_t>(j)]);
    }
    rows.arm0.row(i) = design.basis(xt, 0).transpose();
    rows.arm1.row(i) = design.basis(xt, 1).transpose();
  }
  return rows;
}

enum class SeSource { none, bootstrap, sandwich };

inline std::string to_string(SeSource s) {
  switch (s) {
    case SeSource::none: return "none";
    case SeSource::bootstrap: return "bootstrap";
    case SeSource::sandwich: return "sandwich";
  }
  return "?";
}

struct HteEstimate {
  Vector beta;
  std::vector<std::string> labels;
  std::optional<Matrix> covariance;
  SeSource se_source = SeSource::none;
  int solver_iterations = 0;
  bool converged = false;

  Vector standard_errors() const {
    if (!covariance) return Vector::Constant(beta.size(), std::nan(""));
    return covariance->diagonal().cwiseMax(0.0).cwiseSqrt();
  }
};

// Symmetric and positive semidefinite up to `tol` (relative to the largest
// diagonal entry).
inline bool is_valid_covariance(const Matrix& c, double tol = 1e-8) {
  if (c.rows() != c.cols()) return false;
  const double scale = std::max(1.0, c.diagonal().cwiseAbs().maxCoeff());
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > tol * scale) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (c + c.transpose()));
  return es.eigenvalues().minCoeff() >= -tol * scale;
}

}  // namespace fedhte
