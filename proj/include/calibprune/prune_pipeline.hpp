// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "calibprune/corpus.hpp"
#include "calibprune/dsnot.hpp"
#include "calibprune/error.hpp"
#include "calibprune/owl.hpp"
#include "calibprune/prune.hpp"

namespace calibprune {

enum class PruneMethod { kMagnitude, kWanda, kWandaDsnot };

inline std::string_view PruneMethodName(PruneMethod m) {
  switch (m) {
    case PruneMethod::kMagnitude: return "magnitude";
    case PruneMethod::kWanda: return "wanda";
    case PruneMethod::kWandaDsnot: return "wanda_dsnot";
  }
  return "";
}

inline PruneMethod ParsePruneMethod(std::string_view s) {
  if (s == "magnitude") return PruneMethod::kMagnitude;
  if (s == "wanda") return PruneMethod::kWanda;
  if (s == "wanda_dsnot" || s == "dsnot") return PruneMethod::kWandaDsnot;
  Fail(ErrorCode::kInvalidArgument, "unknown pruning method '" + std::string(s) + "'");
}

// A sparsity setting as written on the command line: "0.5" or "2:4".
struct SparsitySetting {
  bool semi_structured = false;
  double ratio = 0.0;
  size_t n = 0, m = 0;

  std::string label() const {
    if (semi_structured) return std::to_string(n) + ":" + std::to_string(m);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", ratio);
    return buf;
  }
};

inline SparsitySetting ParseSparsity(std::string_view text) {
  SparsitySetting s;
  const auto colon = text.find(':');
  try {
    if (colon != std::string_view::npos) {
      s.semi_structured = true;
      s.n = std::stoul(std::string(text.substr(0, colon)));
      s.m = std::stoul(std::string(text.substr(colon + 1)));
      Require(s.m > 0 && s.n < s.m, ErrorCode::kInvalidArgument, "N:M requires N < M");
      s.ratio = 1.0 - static_cast<double>(s.n) / static_cast<double>(s.m);
    } else {
      size_t used = 0;
      s.ratio = std::stod(std::string(text), &used);
      Require(used == text.size(), ErrorCode::kInvalidArgument, "trailing characters");
      Require(s.ratio >= 0.0 && s.ratio < 1.0, ErrorCode::kInvalidArgument, "ratio must be in [0, 1)");
    }
  } catch (const std::logic_error&) {
    Fail(ErrorCode::kInvalidArgument, "bad sparsity '" + std::string(text) + "'");
  }
  return s;
}

struct OwlOptions {
  bool enabled = false;
  double lambda = 0.08;
  double m_mult = 5.0;
};

struct PruneOptions {
  PruneMethod method = PruneMethod::kWanda;
  SparsitySetting sparsity;
  ComparisonGroup group = ComparisonGroup::kPerRow;
  OwlOptions owl;
  size_t max_cycles = 50;
};

struct PruneResult {
  WeightContainer weights;
  std::vector<PruneMask> masks;
  SparsityPlan plan;
};

// Stats from the dense model (one shot) → plan → per-layer mask → optional
// DSnoT refinement → Ŵ = W ⊙ keep.
inline PruneResult PruneModel(const WeightContainer& w, const CalibrationSet& calib,
                              const PruneOptions& opts) {
  const bool need_stats = opts.method != PruneMethod::kMagnitude || opts.owl.enabled;
  const bool need_gram = opts.method == PruneMethod::kWandaDsnot;
  Require(!(opts.owl.enabled && opts.sparsity.semi_structured), ErrorCode::kInvalidArgument,
          "OWL allocation applies to unstructured sparsity only");
  StatsMap stats;
  if (need_stats) stats = CollectStats(w, calib, need_gram);

  PruneResult result;
  if (opts.sparsity.semi_structured) {
    result.plan = SemiStructuredPlan(opts.sparsity.n, opts.sparsity.m);
  } else if (opts.owl.enabled) {
    result.plan = OwlPlan(stats, w, opts.sparsity.ratio, opts.owl.lambda, opts.owl.m_mult);
  } else {
    result.plan = UniformPlan(w.config(), opts.sparsity.ratio);
  }

  for (const auto& layer : PrunableLayerNames(w.config())) {
    const Matrix& weight = w.at(layer);
    const Matrix scores = opts.method == PruneMethod::kMagnitude ? ScoreMagnitude(weight)
                                                                 : ScoreWanda(w, layer, stats);
    PruneMask mask = opts.sparsity.semi_structured
                         ? BuildMaskNM(scores, opts.sparsity.n, opts.sparsity.m, layer)
                         : BuildMaskUnstructured(scores, result.plan.per_layer_ratio.at(layer), opts.group, layer);
    if (need_gram) {
      DsnotOptions dopts;
      dopts.max_cycles = opts.max_cycles;
      dopts.group_size = opts.sparsity.semi_structured ? opts.sparsity.m : 0;
      mask = DsnotRefine(weight, scores, *stats.at(layer).gram, std::move(mask), dopts);
    }
    result.masks.push_back(std::move(mask));
  }
  result.weights = ApplyMasks(w, result.masks);
  return result;
}

}  // namespace calibprune
