#pragma once

#include "gnnet/bench/correspondences.hpp"
#include "gnnet/bench/dataset.hpp"
#include "gnnet/bench/evaluation.hpp"
#include "gnnet/bench/scene.hpp"
