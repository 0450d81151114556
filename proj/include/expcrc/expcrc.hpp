#pragma once

#include "expcrc/core.hpp"
#include "expcrc/scorer.hpp"
#include "expcrc/sets.hpp"
#include "expcrc/calibrate.hpp"
#include "expcrc/predict.hpp"
#include "expcrc/robust.hpp"
#include "expcrc/sim.hpp"
