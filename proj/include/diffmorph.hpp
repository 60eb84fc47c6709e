#pragma once

#include "diffmorph/tensor.hpp"
#include "diffmorph/ops.hpp"
#include "diffmorph/conv.hpp"
#include "diffmorph/gradcheck.hpp"
#include "diffmorph/io.hpp"
#include "diffmorph/schedule.hpp"
#include "diffmorph/warp.hpp"
#include "diffmorph/losses.hpp"
#include "diffmorph/nets.hpp"
#include "diffmorph/data.hpp"
#include "diffmorph/metrics.hpp"
#include "diffmorph/train.hpp"
