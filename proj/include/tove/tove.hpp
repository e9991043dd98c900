// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header for the token-aware vision-expert transfer library.

#include "tove/checkpoint.hpp"
#include "tove/config.hpp"
#include "tove/data_io.hpp"
#include "tove/error.hpp"
#include "tove/expert_hub.hpp"
#include "tove/graph.hpp"
#include "tove/harness.hpp"
#include "tove/merge.hpp"
#include "tove/nn.hpp"
#include "tove/objectives.hpp"
#include "tove/ops.hpp"
#include "tove/random.hpp"
#include "tove/routing.hpp"
#include "tove/synth.hpp"
#include "tove/tensor.hpp"
#include "tove/train.hpp"
#include "tove/vlm.hpp"
