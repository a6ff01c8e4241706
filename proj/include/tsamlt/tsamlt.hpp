#pragma once

#include "tsamlt/checkpoint.hpp"
#include "tsamlt/config.hpp"
#include "tsamlt/episodes.hpp"
#include "tsamlt/errors.hpp"
#include "tsamlt/gradcheck.hpp"
#include "tsamlt/metrics.hpp"
#include "tsamlt/mlt.hpp"
#include "tsamlt/model.hpp"
#include "tsamlt/nn.hpp"
#include "tsamlt/ops.hpp"
#include "tsamlt/selftest.hpp"
#include "tsamlt/tensor.hpp"
#include "tsamlt/trainer.hpp"
#include "tsamlt/tsa.hpp"
#include "tsamlt/tsae.hpp"
