#ifndef PCEM_PCEM_HPP
#define PCEM_PCEM_HPP

#include "pcem/error.hpp"
#include "pcem/numfmt.hpp"
#include "pcem/rng.hpp"
#include "pcem/panel.hpp"
#include "pcem/panel_csv.hpp"
#include "pcem/stepfn.hpp"
#include "pcem/mstep.hpp"
#include "pcem/em.hpp"
#include "pcem/metrics.hpp"
#include "pcem/simulate.hpp"
#include "pcem/bootstrap.hpp"

#endif  // PCEM_PCEM_HPP
