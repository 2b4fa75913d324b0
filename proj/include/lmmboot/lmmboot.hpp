#pragma once

#include "lmmboot/bootstrap.hpp"
#include "lmmboot/estimation.hpp"
#include "lmmboot/inference.hpp"
#include "lmmboot/parallel.hpp"
#include "lmmboot/rng.hpp"
#include "lmmboot/simulation.hpp"
#include "lmmboot/types.hpp"
#include "lmmboot/variability.hpp"
