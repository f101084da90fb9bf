#pragma once

// Frozen projection truths for the two simulation scenarios under the default
// design (1, A, X1, A:X1) with logit link. Produced by sim::truth_oracle with
// n_oracle = 2e7 (two halves of 1e7, seed 20240601). Certificate at freeze
// time, per coordinate in label order:
//
//   transportable      half-sample gap 1.3e-4 2.1e-4 1.8e-4 2.5e-4, MC SE <= 1.4e-4
//   non-transportable  half-sample gap 1.3e-4 1.9e-4 1.8e-4 2.6e-4, MC SE <= 1.2e-4
//
// Both residual checks on a fresh 1e6 draw fell within 1 MC SE of zero.
// `fedhte truth` recomputes them.

#include "fedhte/numeric.hpp"
#include "fedhte/sim_bench.hpp"

namespace fedhte::sim {

inline Vector reference_truth(Scenario s) {
  Vector b(4);
  if (s == Scenario::transportable) {
    b << -0.20544814777424369, 0.45469725716852172, 0.097709192753806504, 0.52467297751543729;
  } else {
    b << -0.20544814777424344, 0.42348186541075772, 0.097709192753806351, 0.44657825680128682;
  }
  return b;
}

}  // namespace fedhte::sim
