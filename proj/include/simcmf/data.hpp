#pragma once

#include "simcmf/data/dataset.hpp"
#include "simcmf/data/instances.hpp"
#include "simcmf/data/png.hpp"
#include "simcmf/data/synthetic.hpp"
