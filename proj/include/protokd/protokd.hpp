#pragma once

#include "protokd/datagen.hpp"
#include "protokd/diagnostics.hpp"
#include "protokd/episodes.hpp"
#include "protokd/io.hpp"
#include "protokd/linalg.hpp"
#include "protokd/losses.hpp"
#include "protokd/model.hpp"
#include "protokd/rng.hpp"
#include "protokd/training.hpp"
