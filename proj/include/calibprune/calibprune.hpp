// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "calibprune/corpus.hpp"
#include "calibprune/diagnostics.hpp"
#include "calibprune/dsnot.hpp"
#include "calibprune/error.hpp"
#include "calibprune/exact_sum.hpp"
#include "calibprune/experiment.hpp"
#include "calibprune/fixture.hpp"
#include "calibprune/forward.hpp"
#include "calibprune/model.hpp"
#include "calibprune/owl.hpp"
#include "calibprune/parallel.hpp"
#include "calibprune/prune.hpp"
#include "calibprune/prune_pipeline.hpp"
#include "calibprune/rng.hpp"
#include "calibprune/self_gen.hpp"
#include "calibprune/similarity.hpp"
#include "calibprune/tensor.hpp"
#include "calibprune/tokenizer.hpp"
#include "calibprune/train.hpp"
#include "calibprune/weights_io.hpp"
