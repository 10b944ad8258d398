#pragma once

#include "waca/tensor.hpp"
#include "waca/ops.hpp"
#include "waca/random.hpp"
#include "waca/wtns.hpp"
#include "waca/attention.hpp"
#include "waca/backbone.hpp"
#include "waca/preprocess.hpp"
#include "waca/losses.hpp"
#include "waca/optim.hpp"
#include "waca/parallel.hpp"
#include "waca/pdn.hpp"
#include "waca/casegen.hpp"
#include "waca/evalkit.hpp"
#include "waca/train.hpp"
