#pragma once

// Umbrella header for the full library.

#include "mmn/checkpoint.hpp"
#include "mmn/config.hpp"
#include "mmn/data.hpp"
#include "mmn/domains.hpp"
#include "mmn/errors.hpp"
#include "mmn/eval.hpp"
#include "mmn/features.hpp"
#include "mmn/loss.hpp"
#include "mmn/model.hpp"
#include "mmn/network.hpp"
#include "mmn/serve.hpp"
#include "mmn/tensor.hpp"
#include "mmn/trainer.hpp"
