#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedhte {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Overflow-safe logistic function. expit(0) == 0.5 exactly.
inline double expit(double x) noexcept {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) noexcept { return std::log(p) - std::log1p(-p); }

// Compensated accumulation of fixed-length vectors.
class KahanVectorSum {
 public:
  explicit KahanVectorSum(Eigen::Index dim) : sum_(Vector::Zero(dim)), carry_(Vector::Zero(dim)) {}

  void add(const Vector& v) {
    for (Eigen::Index k = 0; k < sum_.size(); ++k) {
      const double y = v[k] - carry_[k];
      const double t = sum_[k] + y;
      carry_[k] = (t - sum_[k]) - y;
      sum_[k] = t;
    }
  }

  const Vector& sum() const noexcept { return sum_; }

 private:
  Vector sum_;
  Vector carry_;
};

inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for replicate `b` at site `site_id`. Depends on nothing else, so a site
// can restart or switch transport and still regenerate the same replicate.
inline std::uint64_t replicate_seed(std::uint64_t base_seed, std::string_view site_id,
                                    std::uint64_t b) noexcept {
  std::uint64_t h = splitmix64(base_seed);
  h = splitmix64(h ^ fnv1a64(site_id));
  return splitmix64(h ^ (b * 0xd1342543de82ef95ULL));
}

using Rng = std::mt19937_64;

// Row indices of a with-replacement resample of size n.
inline std::vector<Eigen::Index> bootstrap_indices(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (auto& i : idx) {
    i = pick(rng);
  }
  return idx;
}

// Column-wise sample standard deviation (denominator rows - 1).
inline Vector column_sd(const Matrix& m) {
  const Eigen::Index r = m.rows();
  Vector sd = Vector::Zero(m.cols());
  if (r < 2) {
    return sd;
  }
  const Eigen::RowVectorXd mean = m.colwise().mean();
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double ss = (m.col(j).array() - mean[j]).square().sum();
    sd[j] = std::sqrt(ss / static_cast<double>(r - 1));
  }
  return sd;
}

// Linear-interpolation quantile (the usual "type 7" definition).
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) {
    return std::nan("");
  }
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline constexpr double kZ975 = 1.959964;

}  // namespace fedhte
