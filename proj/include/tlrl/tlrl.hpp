#pragma once

#include "tlrl/errors.hpp"
#include "tlrl/random.hpp"
#include "tlrl/dataio.hpp"
#include "tlrl/imaging.hpp"
#include "tlrl/backbones.hpp"
#include "tlrl/nn.hpp"
#include "tlrl/rl.hpp"
#include "tlrl/harness.hpp"
