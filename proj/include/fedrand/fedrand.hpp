// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_FEDRAND_HPP
#define FEDRAND_FEDRAND_HPP

#include "fedrand/adamw.hpp"
#include "fedrand/checkpoint.hpp"
#include "fedrand/data.hpp"
#include "fedrand/errors.hpp"
#include "fedrand/experiment.hpp"
#include "fedrand/matrix.hpp"
#include "fedrand/mia.hpp"
#include "fedrand/model.hpp"
#include "fedrand/protocol.hpp"
#include "fedrand/rng.hpp"

#endif  // FEDRAND_FEDRAND_HPP
