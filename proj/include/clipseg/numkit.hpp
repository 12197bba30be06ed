#pragma once

#include "clipseg/numkit/autodiff.hpp"
#include "clipseg/numkit/gradcheck.hpp"
#include "clipseg/numkit/kernels.hpp"
#include "clipseg/numkit/parallel.hpp"
#include "clipseg/numkit/rng.hpp"
#include "clipseg/numkit/tensor.hpp"
#include "clipseg/numkit/types.hpp"
