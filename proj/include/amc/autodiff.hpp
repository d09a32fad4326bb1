#pragma once

#include "amc/autodiff/graph.hpp"
#include "amc/autodiff/kernels.hpp"
#include "amc/autodiff/tape.hpp"
#include "amc/autodiff/tensor.hpp"
