#pragma once

#include "dumo/checkpoint.hpp"
#include "dumo/config.hpp"
#include "dumo/data.hpp"
#include "dumo/errors.hpp"
#include "dumo/eval.hpp"
#include "dumo/grad_check.hpp"
#include "dumo/lab.hpp"
#include "dumo/metrics.hpp"
#include "dumo/network.hpp"
#include "dumo/objectives.hpp"
#include "dumo/rng.hpp"
#include "dumo/sampling.hpp"
#include "dumo/training.hpp"
#include "dumo/transport.hpp"
#include "dumo/types.hpp"
