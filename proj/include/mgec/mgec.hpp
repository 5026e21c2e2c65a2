#pragma once

// Umbrella header for the MGEC library.

#include "mgec/adam.hpp"
#include "mgec/backprop.hpp"
#include "mgec/checkpoint.hpp"
#include "mgec/data.hpp"
#include "mgec/errors.hpp"
#include "mgec/evaluation.hpp"
#include "mgec/gradcheck.hpp"
#include "mgec/io.hpp"
#include "mgec/loss_gradcheck.hpp"
#include "mgec/losses.hpp"
#include "mgec/matrix.hpp"
#include "mgec/metrics.hpp"
#include "mgec/mlp.hpp"
#include "mgec/models.hpp"
#include "mgec/rng.hpp"
#include "mgec/synthetic.hpp"
#include "mgec/training.hpp"
