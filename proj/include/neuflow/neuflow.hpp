#pragma once

#include "neuflow/attention.hpp"
#include "neuflow/backbone.hpp"
#include "neuflow/checkpoint.hpp"
#include "neuflow/config.hpp"
#include "neuflow/dataset.hpp"
#include "neuflow/evalbench.hpp"
#include "neuflow/flo_io.hpp"
#include "neuflow/image_io.hpp"
#include "neuflow/model.hpp"
#include "neuflow/refinement.hpp"
#include "neuflow/synthetic.hpp"
#include "neuflow/training.hpp"
#include "neuflow/upsampler.hpp"
#include "neuflow/visualize.hpp"
