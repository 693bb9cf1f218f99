#pragma once

// Umbrella header.

#include "cotrain/adam.hpp"
#include "cotrain/adversarial.hpp"
#include "cotrain/config.hpp"
#include "cotrain/data.hpp"
#include "cotrain/errors.hpp"
#include "cotrain/losses.hpp"
#include "cotrain/metrics.hpp"
#include "cotrain/records.hpp"
#include "cotrain/rng.hpp"
#include "cotrain/schedule.hpp"
#include "cotrain/segnet.hpp"
#include "cotrain/tape.hpp"
#include "cotrain/tensor.hpp"
#include "cotrain/trainer.hpp"
#include "cotrain/version.hpp"
