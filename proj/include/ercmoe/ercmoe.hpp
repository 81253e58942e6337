#pragma once

#include "ercmoe/aoe_layer.hpp"
#include "ercmoe/autodiff.hpp"
#include "ercmoe/checkpoint.hpp"
#include "ercmoe/config.hpp"
#include "ercmoe/erc_loss.hpp"
#include "ercmoe/errors.hpp"
#include "ercmoe/flops.hpp"
#include "ercmoe/grad_check.hpp"
#include "ercmoe/model.hpp"
#include "ercmoe/moe_layer.hpp"
#include "ercmoe/noise_check.hpp"
#include "ercmoe/random.hpp"
#include "ercmoe/synth_task.hpp"
#include "ercmoe/tensor.hpp"
#include "ercmoe/trainer.hpp"
