#pragma once

#include "fedhte/fedhte.hpp"

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace fedhte::testing {

inline const std::vector<std::string>& covariate_names4() {
  static const std::vector<std::string> n{"X1", "X2", "X3", "X4"};
  return n;
}

// Four standard-normal covariates (the first two shifted), logistic
// treatment, binary or Gaussian outcome.
inline ObservationTable random_site(const std::string& id, int n, std::uint64_t seed, bool binary,
                                    double shift = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  Matrix x(n, 4);
  Vector a(n), y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) x(i, j) = nd(rng) + (j < 2 ? shift : 0.0);
    a[i] = ud(rng) < expit(0.3 * x(i, 0) - 0.2 * x(i, 1) + 0.1 * x(i, 2)) ? 1.0 : 0.0;
    const double lin = -0.2 + a[i] * (0.8 + 0.5 * x(i, 0)) + 0.4 * x(i, 1) - 0.3 * x(i, 3);
    y[i] = binary ? (ud(rng) < expit(lin) ? 1.0 : 0.0) : lin + nd(rng);
  }
  return ObservationTable(id, y, a, x, covariate_names4(), {0});
}

inline GlmSpec ps_all() { return GlmSpec{GlmFamily::bernoulli_logit, covariate_names4(), true, false}; }
inline GlmSpec or_all(bool binary = true) {
  return GlmSpec{binary ? GlmFamily::bernoulli_logit : GlmFamily::gaussian_identity, covariate_names4(), true,
                 true};
}
inline TiltSpec tilt_all() { return TiltSpec{covariate_names4(), true}; }

inline wire::RoundConfig round_config(const WorkingDesign& design, bool binary = true, std::uint64_t seed = 0) {
  wire::RoundConfig rc;
  rc.design = wire::DesignDescriptor::from(design);
  rc.tilt = tilt_all();
  rc.ps = ps_all();
  rc.or_spec = or_all(binary);
  rc.base_seed = seed;
  return rc;
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("fedhte_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace fedhte::testing
