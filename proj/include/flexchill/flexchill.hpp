#pragma once

// Umbrella header: the whole library in one include.

#include "flexchill/analysis.hpp"
#include "flexchill/checkpoint.hpp"
#include "flexchill/config.hpp"
#include "flexchill/data.hpp"
#include "flexchill/errors.hpp"
#include "flexchill/experiment.hpp"
#include "flexchill/federated.hpp"
#include "flexchill/model.hpp"
#include "flexchill/ops.hpp"
#include "flexchill/params.hpp"
#include "flexchill/partition.hpp"
#include "flexchill/rng.hpp"
#include "flexchill/tensor.hpp"
