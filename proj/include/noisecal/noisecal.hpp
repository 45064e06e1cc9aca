#pragma once

#include "noisecal/binary_io.hpp"
#include "noisecal/checkpoint.hpp"
#include "noisecal/config.hpp"
#include "noisecal/data.hpp"
#include "noisecal/engine.hpp"
#include "noisecal/errors.hpp"
#include "noisecal/metrics.hpp"
#include "noisecal/nn.hpp"
#include "noisecal/optim.hpp"
#include "noisecal/rng.hpp"
#include "noisecal/stats.hpp"
#include "noisecal/tensor.hpp"
#include "noisecal/workspace.hpp"
