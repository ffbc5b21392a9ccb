#pragma once

// Convenience header pulling in the whole library.

#include "gridmix/errors.hpp"
#include "gridmix/io.hpp"
#include "gridmix/metrics.hpp"
#include "gridmix/model_core.hpp"
#include "gridmix/simulate.hpp"
#include "gridmix/solver.hpp"
#include "gridmix/theory.hpp"
#include "gridmix/tuning.hpp"
#include "gridmix/twostep.hpp"
