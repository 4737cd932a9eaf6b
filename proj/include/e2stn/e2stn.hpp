#pragma once

#include "e2stn/core.hpp"
#include "e2stn/autodiff.hpp"
#include "e2stn/ops.hpp"
#include "e2stn/data_model.hpp"
#include "e2stn/signal_prep.hpp"
#include "e2stn/transfer_module.hpp"
#include "e2stn/discriminative_module.hpp"
#include "e2stn/transfer_evaluation.hpp"
#include "e2stn/model.hpp"
#include "e2stn/trainer.hpp"
#include "e2stn/experiment.hpp"
