#pragma once

// Convenience umbrella — pulls in the whole library.

#include "milkit/archive.hpp"
#include "milkit/augment.hpp"
#include "milkit/autodiff.hpp"
#include "milkit/cli.hpp"
#include "milkit/common.hpp"
#include "milkit/contrastive.hpp"
#include "milkit/dataio.hpp"
#include "milkit/eval.hpp"
#include "milkit/models.hpp"
#include "milkit/prototypes.hpp"
#include "milkit/rng.hpp"
#include "milkit/synth.hpp"
#include "milkit/training.hpp"
