#pragma once

#include "cnncrf/common.hpp"
#include "cnncrf/stereo_io.hpp"
#include "cnncrf/unary_cnn.hpp"
#include "cnncrf/correlation.hpp"
#include "cnncrf/pairwise.hpp"
#include "cnncrf/crf.hpp"
#include "cnncrf/eval.hpp"
#include "cnncrf/model.hpp"
#include "cnncrf/training.hpp"
#include "cnncrf/checkpoint.hpp"
