#pragma once

/**
 * @file
 * @brief Everything: models, controllers, optimizer, robust program, filter, metrics and harness.
 */

#include "mpsf/controllers.hpp"
#include "mpsf/dynamics.hpp"
#include "mpsf/filter.hpp"
#include "mpsf/harness/artifacts.hpp"
#include "mpsf/harness/config.hpp"
#include "mpsf/harness/experiment.hpp"
#include "mpsf/metrics.hpp"
#include "mpsf/qp.hpp"
#include "mpsf/robust_mpc.hpp"
#include "mpsf/sqp.hpp"
