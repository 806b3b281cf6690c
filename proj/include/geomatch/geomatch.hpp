#pragma once

#include "geomatch/error.hpp"
#include "geomatch/eval.hpp"
#include "geomatch/geometry.hpp"
#include "geomatch/gradcheck.hpp"
#include "geomatch/image.hpp"
#include "geomatch/loss.hpp"
#include "geomatch/matching.hpp"
#include "geomatch/model.hpp"
#include "geomatch/network.hpp"
#include "geomatch/synth.hpp"
#include "geomatch/warp.hpp"
