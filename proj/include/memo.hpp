#pragma once

#include "memo/errors.hpp"
#include "memo/tensor.hpp"
#include "memo/autodiff.hpp"
#include "memo/rng.hpp"
#include "memo/io.hpp"
#include "memo/data.hpp"
#include "memo/mlp.hpp"
#include "memo/lass.hpp"
#include "memo/train.hpp"
#include "memo/sensitivity.hpp"
#include "memo/csr.hpp"
#include "memo/experiments.hpp"
#include "memo/version.hpp"
