// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Sparsity plans and outlier-weighted layer-wise allocation. Blocks whose
// Wanda scores contain more outliers get lower sparsity; the
// parameter-weighted mean stays at the global target.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "calibprune/error.hpp"
#include "calibprune/model.hpp"
#include "calibprune/prune.hpp"

namespace calibprune {

struct SparsityPlan {
  enum class Pattern { kUnstructured, kSemiStructured };

  Pattern pattern = Pattern::kUnstructured;
  size_t n = 0;  // N:M only
  size_t m = 0;
  double global_target = 0.0;
  std::map<std::string, double> per_layer_ratio;  // unstructured only

  std::string pattern_name() const {
    return pattern == Pattern::kUnstructured ? "unstructured"
                                             : std::to_string(n) + ":" + std::to_string(m);
  }

  // Parameter-weighted mean of per-layer ratios, or 1 − N/M.
  double implied_sparsity(const ModelConfig& cfg) const {
    if (pattern == Pattern::kSemiStructured) return 1.0 - static_cast<double>(n) / static_cast<double>(m);
    double num = 0.0, den = 0.0;
    for (const auto& [name, ratio] : per_layer_ratio) {
      const auto id = ParseLinearName(name, cfg);
      Require(id.has_value(), ErrorCode::kInvalidArgument, "plan names unknown layer " + name);
      const auto [r, c] = LinearShape(cfg, id->kind);
      num += ratio * static_cast<double>(r * c);
      den += static_cast<double>(r * c);
    }
    return den == 0.0 ? 0.0 : num / den;
  }
};

inline SparsityPlan UniformPlan(const ModelConfig& cfg, double s) {
  Require(s >= 0.0 && s < 1.0, ErrorCode::kInvalidArgument, "sparsity must be in [0, 1)");
  SparsityPlan plan;
  plan.global_target = s;
  for (const auto& name : PrunableLayerNames(cfg)) plan.per_layer_ratio[name] = s;
  return plan;
}

inline SparsityPlan SemiStructuredPlan(size_t n, size_t m) {
  Require(m > 0 && n < m, ErrorCode::kInvalidArgument, "N:M requires N < M");
  SparsityPlan plan;
  plan.pattern = SparsityPlan::Pattern::kSemiStructured;
  plan.n = n;
  plan.m = m;
  plan.global_target = 1.0 - static_cast<double>(n) / static_cast<double>(m);
  return plan;
}

// Fraction of entries strictly above m_mult × (mean of the matrix).
inline double OutlierRatio(const Matrix& scores, double m_mult) {
  if (scores.empty()) return 0.0;
  double sum = 0.0;
  for (float v : scores.flat()) sum += v;
  const double threshold = m_mult * sum / static_cast<double>(scores.size());
  size_t count = 0;
  for (float v : scores.flat()) count += static_cast<double>(v) > threshold ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(scores.size());
}

// Maps per-block outlier ratios to block sparsities: affine and decreasing
// into [S−λ, S+λ] (largest ratio → S−λ), then shifted by a common offset
// with clamping to that interval until the parameter-weighted mean is S.
inline std::vector<double> OwlAllocate(const std::vector<double>& outlier_ratios,
                                       const std::vector<double>& block_params, double target,
                                       double lambda) {
  Require(outlier_ratios.size() == block_params.size() && !outlier_ratios.empty(),
          ErrorCode::kInvalidArgument, "one outlier ratio and parameter count per block");
  Require(target > 0.0 && target < 1.0, ErrorCode::kInvalidArgument, "target must be in (0, 1)");
  Require(lambda >= 0.0 && target - lambda >= 0.0 && target + lambda < 1.0,
          ErrorCode::kInvalidArgument, "infeasible OWL bounds: S±lambda must stay in [0, 1)");
  const size_t nb = outlier_ratios.size();
  const auto [dmin_it, dmax_it] = std::minmax_element(outlier_ratios.begin(), outlier_ratios.end());
  const double dmin = *dmin_it, dmax = *dmax_it;
  std::vector<double> s(nb, target);
  if (dmax == dmin || lambda == 0.0) return s;
  const double lo = target - lambda, hi = target + lambda;
  for (size_t b = 0; b < nb; ++b) {
    s[b] = hi - 2.0 * lambda * (outlier_ratios[b] - dmin) / (dmax - dmin);
  }
  double total = 0.0;
  for (double p : block_params) total += p;
  auto mean_at = [&](double shift) {
    double acc = 0.0;
    for (size_t b = 0; b < nb; ++b) acc += block_params[b] * std::clamp(s[b] + shift, lo, hi);
    return acc / total;
  };
  // The clamped mean is continuous and non-decreasing in the shift.
  double a = -2.0 * lambda, c = 2.0 * lambda;
  for (int it = 0; it < 200 && c - a > 0.0; ++it) {
    const double mid = 0.5 * (a + c);
    if (mean_at(mid) < target) a = mid;
    else c = mid;
  }
  const double shift = std::abs(mean_at(a) - target) <= std::abs(mean_at(c) - target) ? a : c;
  for (double& v : s) v = std::clamp(v + shift, lo, hi);
  return s;
}

// Per-block outlier ratio: mean over the block's six layers of the fraction of
// Wanda scores above m_mult × that layer's mean score.
inline std::vector<double> BlockOutlierRatios(const WeightContainer& w, const StatsMap& stats,
                                              double m_mult) {
  const ModelConfig& cfg = w.config();
  std::vector<double> ratios(cfg.n_layers, 0.0);
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    double acc = 0.0;
    for (LinearKind kind : kLinearKinds) {
      acc += OutlierRatio(ScoreWanda(w, LinearName(b, kind), stats), m_mult);
    }
    ratios[b] = acc / static_cast<double>(kLinearKinds.size());
  }
  return ratios;
}

inline SparsityPlan OwlPlan(const StatsMap& stats, const WeightContainer& w, double target,
                            double lambda = 0.08, double m_mult = 5.0) {
  const ModelConfig& cfg = w.config();
  const auto ratios = BlockOutlierRatios(w, stats, m_mult);
  std::vector<double> params(cfg.n_layers, 0.0);
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    for (LinearKind kind : kLinearKinds) {
      const auto [r, c] = LinearShape(cfg, kind);
      params[b] += static_cast<double>(r * c);
    }
  }
  const auto block_s = OwlAllocate(ratios, params, target, lambda);
  SparsityPlan plan;
  plan.global_target = target;
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    for (LinearKind kind : kLinearKinds) plan.per_layer_ratio[LinearName(b, kind)] = block_s[b];
  }
  return plan;
}

}  // namespace calibprune
