#pragma once

#include "volterra/config.hpp"
#include "volterra/errors.hpp"
#include "volterra/kernel_model.hpp"
#include "volterra/pipeline.hpp"
#include "volterra/regularizers.hpp"
#include "volterra/solver.hpp"
#include "volterra/tanks.hpp"
#include "volterra/transient.hpp"
#include "volterra/tuning.hpp"
