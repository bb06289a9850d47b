#pragma once

// Umbrella header.

#include "aclf/attention.hpp"
#include "aclf/checkpoint.hpp"
#include "aclf/cluster1d.hpp"
#include "aclf/cluster2d.hpp"
#include "aclf/model.hpp"
#include "aclf/rng.hpp"
#include "aclf/tensor.hpp"
#include "aclf/toy_scenes.hpp"
#include "aclf/training.hpp"
