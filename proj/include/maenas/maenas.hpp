#pragma once

#include "maenas/tensor.hpp"
#include "maenas/autograd.hpp"
#include "maenas/ops.hpp"
#include "maenas/io.hpp"
#include "maenas/search_space.hpp"
#include "maenas/masking.hpp"
#include "maenas/nn.hpp"
#include "maenas/operations.hpp"
#include "maenas/supernet.hpp"
#include "maenas/decoder.hpp"
#include "maenas/autoencoder.hpp"
#include "maenas/data.hpp"
#include "maenas/optim.hpp"
#include "maenas/objective.hpp"
#include "maenas/bilevel_search.hpp"
#include "maenas/collapse_monitor.hpp"
#include "maenas/retrain.hpp"
#include "maenas/analysis.hpp"
#include "maenas/config.hpp"
#include "maenas/experiment.hpp"
