#pragma once

// Umbrella header: the whole library in dependency order.

#include "fblab/core/error.hpp"
#include "fblab/core/rng.hpp"

#include "fblab/cmp/cmp.hpp"
#include "fblab/cmp/oracle.hpp"

#include "fblab/latent/latent.hpp"

#include "fblab/grad/tape.hpp"
#include "fblab/grad/adamw.hpp"
#include "fblab/grad/check.hpp"

#include "fblab/model/model.hpp"
#include "fblab/loss/losses.hpp"

#include "fblab/analysis/metrics.hpp"
#include "fblab/analysis/theory.hpp"

#include "fblab/train/trainer.hpp"

#include "fblab/harness/config.hpp"
#include "fblab/harness/runner.hpp"
