#pragma once
// Umbrella header.
#include "error.hpp"
#include "rng.hpp"
#include "supply_graph.hpp"
#include "dynamics.hpp"
#include "world_model.hpp"
#include "linear_toy_env.hpp"
#include "hindsight.hpp"
#include "llm_adapter.hpp"
#include "agent.hpp"
#include "config.hpp"
#include "reflect_loop.hpp"
#include "metrics.hpp"
#include "harness.hpp"
#include "fixtures.hpp"
