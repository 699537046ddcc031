#pragma once

#include "spikesleep/attention_model.hpp"
#include "spikesleep/commands.hpp"
#include "spikesleep/error.hpp"
#include "spikesleep/evaluation.hpp"
#include "spikesleep/feature_io.hpp"
#include "spikesleep/filterbank.hpp"
#include "spikesleep/run_config.hpp"
#include "spikesleep/signal_io.hpp"
#include "spikesleep/spike_encoder.hpp"
#include "spikesleep/tensor.hpp"
