#pragma once

#include "cope/common.hpp"
#include "cope/mdp_model.hpp"
#include "cope/simulator.hpp"
#include "cope/dataset_io.hpp"
#include "cope/features.hpp"
#include "cope/nuisance.hpp"
#include "cope/estimators.hpp"
#include "cope/oracle.hpp"
#include "cope/harness.hpp"
