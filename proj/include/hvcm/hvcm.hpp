#pragma once

#include "hvcm/attribute_space.hpp"
#include "hvcm/class_density.hpp"
#include "hvcm/error.hpp"
#include "hvcm/eval_harness.hpp"
#include "hvcm/feature_store.hpp"
#include "hvcm/joint_trainer.hpp"
