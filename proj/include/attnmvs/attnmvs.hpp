#pragma once

#include "attnmvs/attention.hpp"
#include "attnmvs/checkpoint.hpp"
#include "attnmvs/costvol.hpp"
#include "attnmvs/dataset.hpp"
#include "attnmvs/depthnet.hpp"
#include "attnmvs/errors.hpp"
#include "attnmvs/evalmetrics.hpp"
#include "attnmvs/fusion.hpp"
#include "attnmvs/geometry.hpp"
#include "attnmvs/gradcheck.hpp"
#include "attnmvs/io.hpp"
#include "attnmvs/ops.hpp"
#include "attnmvs/params.hpp"
#include "attnmvs/synthetic.hpp"
#include "attnmvs/tensor.hpp"
#include "attnmvs/training.hpp"
