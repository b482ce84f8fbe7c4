#pragma once

#include "taste/common.hpp"
#include "taste/dataio.hpp"
#include "taste/features.hpp"
#include "taste/metrics.hpp"
#include "taste/models.hpp"
#include "taste/muqtoken.hpp"
#include "taste/pipeline.hpp"
#include "taste/synth.hpp"
#include "taste/tensor.hpp"
#include "taste/train.hpp"
