#pragma once

#include "llmboost/errors.hpp"
#include "llmboost/numkit.hpp"
#include "llmboost/transformer.hpp"
#include "llmboost/ensemble.hpp"
#include "llmboost/tasks.hpp"
#include "llmboost/training.hpp"
#include "llmboost/pipeline.hpp"
#include "llmboost/schedlab.hpp"
#include "llmboost/theoryprobe.hpp"
#include "llmboost/checkpoint.hpp"
#include "llmboost/verify.hpp"
#include "llmboost/config.hpp"
