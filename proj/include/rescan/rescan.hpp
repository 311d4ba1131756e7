#pragma once

#include "rescan/adam.hpp"
#include "rescan/checkpoint.hpp"
#include "rescan/gradcheck.hpp"
#include "rescan/errors.hpp"
#include "rescan/image.hpp"
#include "rescan/metrics.hpp"
#include "rescan/nn_blocks.hpp"
#include "rescan/ops.hpp"
#include "rescan/rain_sim.hpp"
#include "rescan/scan_model.hpp"
#include "rescan/tensor.hpp"
#include "rescan/train.hpp"
