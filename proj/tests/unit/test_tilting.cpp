#include "support.hpp"

#include <gtest/gtest.h>

using namespace fedhte;
using namespace fedhte::testing;

TEST(Tilt, BinaryClosedForm) {
  // 25% ones in the source, 50% in the target: tau(0) = 2/3, tau(1) = 2.
  Matrix r(100, 2);
  for (int i = 0; i < 100; ++i) {
    r(i, 0) = 1.0;
    r(i, 1) = i < 25 ? 1.0 : 0.0;
  }
  const TiltFit f = fit_tilt(r, (Vector(2) << 1.0, 0.5).finished());
  ASSERT_TRUE(f.converged);
  EXPECT_NEAR(f.alpha[0], std::log(2.0 / 3.0), 1e-10);
  EXPECT_NEAR(f.alpha[1], std::log(3.0), 1e-10);
  const Vector w = tilt_weights(r, f.alpha);
  EXPECT_NEAR(w.maxCoeff(), 2.0, 1e-10);
  EXPECT_NEAR(f.max_weight, 2.0, 1e-10);
  // Kish ESS: (25*2 + 75*2/3)^2 / (25*4 + 75*4/9)
  EXPECT_NEAR(f.ess, 10000.0 / (100.0 + 300.0 / 9.0), 1e-8);
}

TEST(Tilt, MomentsMatchedOnShiftedSources) {
  for (std::uint64_t s = 1; s <= 10; ++s) {
    const ObservationTable target = random_site("t", 300, s, true);
    const ObservationTable source = random_site("m", 1000, 100 + s, true, 0.3);
    const TiltSpec spec = tilt_all();
    const Vector tm = target_moments(target, spec);
    const TiltFit f = fit_tilt(source, tm, spec);
    ASSERT_TRUE(f.converged);
    const Matrix r = tilt_features(source, spec);
    EXPECT_LT((r.transpose() * tilt_weights(r, f.alpha) / 1000.0 - tm).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE(f.residual, 1e-8);
  }
}

TEST(Tilt, IdenticalMomentsGiveZeroAlpha) {
  const ObservationTable s = random_site("m", 300, 3, true);
  const TiltSpec spec = tilt_all();
  const TiltFit f = fit_tilt(s, target_moments(s, spec), spec);
  ASSERT_TRUE(f.converged);
  EXPECT_LT(f.alpha.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(f.ess, 300.0, 1e-8);
}

TEST(Tilt, JacobianMatchesFiniteDifferences) {
  const ObservationTable s = random_site("m", 500, 8, true);
  const Matrix r = tilt_features(s, tilt_all());
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  for (int k = 0; k < 10; ++k) {
    Vector alpha(r.cols());
    for (Eigen::Index j = 0; j < alpha.size(); ++j) alpha[j] = 0.3 * nd(rng);
    const Matrix j_an = tilted_moments_jacobian(r, alpha);
    for (Eigen::Index j = 0; j < alpha.size(); ++j) {
      Vector ap = alpha, am = alpha;
      ap[j] += 1e-6;
      am[j] -= 1e-6;
      const Vector fd = (tilted_moments(r, ap) - tilted_moments(r, am)) / 2e-6;
      EXPECT_LT((fd - j_an.col(j)).cwiseAbs().maxCoeff(), 1e-5 * j_an.cwiseAbs().maxCoeff());
    }
  }
}

TEST(Tilt, UnreachableTargetDoesNotConverge) {
  // The target mean lies outside the source support.
  Matrix r(50, 2);
  for (int i = 0; i < 50; ++i) {
    r(i, 0) = 1.0;
    r(i, 1) = i % 2;
  }
  const TiltFit f = fit_tilt(r, (Vector(2) << 1.0, 1.5).finished());
  EXPECT_FALSE(f.converged);
  EXPECT_FALSE(f.diagnostic.empty());
}

TEST(Tilt, FeaturesStartWithTheNormalizationColumn) {
  const ObservationTable s = random_site("m", 10, 4, true);
  const Matrix r = tilt_features(s, TiltSpec{{"X2"}, true});
  ASSERT_EQ(r.cols(), 2);
  EXPECT_EQ(r.col(0), Vector::Ones(10));
  EXPECT_EQ(r.col(1), s.covariates().col(1));
  EXPECT_EQ(TiltFit::identity(3, 10).alpha, Vector::Zero(3));
}
