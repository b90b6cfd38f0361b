#pragma once

#include "cfair/adam.hpp"
#include "cfair/autodiff.hpp"
#include "cfair/config.hpp"
#include "cfair/dataset.hpp"
#include "cfair/errors.hpp"
#include "cfair/fair.hpp"
#include "cfair/kernels.hpp"
#include "cfair/mlp.hpp"
#include "cfair/ncm.hpp"
#include "cfair/pipeline.hpp"
#include "cfair/random.hpp"
#include "cfair/scm.hpp"
#include "cfair/tradeoff.hpp"
#include "cfair/types.hpp"
