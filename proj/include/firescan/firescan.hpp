#pragma once

#include "firescan/error.hpp"
#include "firescan/random.hpp"
#include "firescan/tensor.hpp"
#include "firescan/raster_io.hpp"
#include "firescan/preprocess.hpp"
#include "firescan/dataset.hpp"
#include "firescan/nn.hpp"
#include "firescan/models.hpp"
#include "firescan/rules.hpp"
#include "firescan/metrics.hpp"
#include "firescan/pipeline.hpp"
#include "firescan/experiments.hpp"
#include "firescan/synthgen.hpp"
