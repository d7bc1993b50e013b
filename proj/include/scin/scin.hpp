#pragma once

#include "scin/error.hpp"
#include "scin/tensor.hpp"
#include "scin/ops.hpp"
#include "scin/optim.hpp"
#include "scin/cin.hpp"
#include "scin/unet.hpp"
#include "scin/mask.hpp"
#include "scin/metrics.hpp"
#include "scin/cohort.hpp"
#include "scin/training.hpp"
#include "scin/checkpoint.hpp"
#include "scin/dataset_io.hpp"
#include "scin/experiments.hpp"
#include "scin/selfcheck.hpp"
#include "scin/report.hpp"
#include "scin/config.hpp"
