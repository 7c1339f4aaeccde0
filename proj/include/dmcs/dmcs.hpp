#pragma once

#include "dmcs/checkpoint.hpp"
#include "dmcs/core.hpp"
#include "dmcs/dataio.hpp"
#include "dmcs/gradcheck.hpp"
#include "dmcs/image_io.hpp"
#include "dmcs/losses.hpp"
#include "dmcs/metrics.hpp"
#include "dmcs/model.hpp"
#include "dmcs/pipeline.hpp"
#include "dmcs/postprocess.hpp"
#include "dmcs/report.hpp"
#include "dmcs/trainer.hpp"
