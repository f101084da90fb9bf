#pragma once

#include "fedhte/dr_solver.hpp"
#include "fedhte/config.hpp"
#include "fedhte/error.hpp"
#include "fedhte/federation/codec.hpp"
#include "fedhte/federation/coordinator.hpp"
#include "fedhte/federation/site.hpp"
#include "fedhte/federation/transport.hpp"
#include "fedhte/glm.hpp"
#include "fedhte/inference.hpp"
#include "fedhte/model_core.hpp"
#include "fedhte/numeric.hpp"
#include "fedhte/pipeline.hpp"
#include "fedhte/reference_truth.hpp"
#include "fedhte/sim_bench.hpp"
#include "fedhte/table_io.hpp"
#include "fedhte/tilting.hpp"
