#pragma once

//! Convenience header pulling in the whole library.

#include "markhaz/bandwidth.hpp"
#include "markhaz/cli.hpp"
#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/harness.hpp"
#include "markhaz/inference.hpp"
#include "markhaz/io.hpp"
#include "markhaz/kernel.hpp"
#include "markhaz/rng.hpp"
#include "markhaz/simulate.hpp"
