#pragma once

// Umbrella header for the numerical library.

#include "robust_ustat/covariance.hpp"
#include "robust_ustat/errors.hpp"
#include "robust_ustat/io.hpp"
#include "robust_ustat/matfun.hpp"
#include "robust_ustat/matrix.hpp"
#include "robust_ustat/parallel.hpp"
#include "robust_ustat/robust.hpp"
#include "robust_ustat/synth.hpp"
#include "robust_ustat/ustat.hpp"
