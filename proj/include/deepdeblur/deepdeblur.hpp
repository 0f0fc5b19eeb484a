#pragma once

// Convenience include for the whole pipeline.

#include "deepdeblur/errors.hpp"
#include "deepdeblur/evalbench.hpp"
#include "deepdeblur/imaging.hpp"
#include "deepdeblur/kernels.hpp"
#include "deepdeblur/losses.hpp"
#include "deepdeblur/model.hpp"
#include "deepdeblur/rng.hpp"
#include "deepdeblur/tensor.hpp"
#include "deepdeblur/training.hpp"
