#pragma once

#include "treenet/tensor.hpp"
#include "treenet/autograd.hpp"
#include "treenet/parallel.hpp"
#include "treenet/gemm.hpp"
#include "treenet/ops.hpp"
#include "treenet/module.hpp"
#include "treenet/blocks.hpp"
#include "treenet/model_zoo.hpp"
#include "treenet/cost_model.hpp"
#include "treenet/trainer.hpp"
#include "treenet/checkpoint.hpp"
#include "treenet/config.hpp"
#include "treenet/gradcheck.hpp"
#include "treenet/verify.hpp"
