// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Training-free mask refinement by regrow/prune swaps. For a row w and input
// Gram matrix G = Σ xᵀx, the row's reconstruction error is
//
//   e(row) = dᵀ G d,   d = w ⊙ (1 − keep)   (the dropped weights)
//
// which expands to ŵGŵᵀ − 2ŵGwᵀ + wGwᵀ for ŵ = w ⊙ keep. Swaps pair a pruned
// weight (regrow, highest Wanda score first) with a kept weight (prune, lowest
// score first; same M-group for N:M masks). A swap is committed only when
// e(row) strictly decreases.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "calibprune/error.hpp"
#include "calibprune/prune.hpp"

namespace calibprune {

struct DsnotOptions {
  size_t max_cycles = 50;  // swap proposals per row
  size_t group_size = 0;   // M for N:M masks, 0 for unstructured
};

struct DsnotRowTrace {
  // Error before any swap followed by the error after each committed swap,
  // each recomputed from scratch.
  std::vector<double> errors;
};

// dᵀGd in double for the dropped weights of one row.
inline double RowReconError(std::span<const float> w, const PruneMask& mask, size_t row,
                            const Matrix& gram) {
  const size_t n = w.size();
  std::vector<size_t> dropped;
  for (size_t j = 0; j < n; ++j) {
    if (!mask.keep(row, j)) dropped.push_back(j);
  }
  double e = 0.0;
  for (size_t a : dropped) {
    double inner = 0.0;
    for (size_t b : dropped) inner += static_cast<double>(gram(a, b)) * w[b];
    e += static_cast<double>(w[a]) * inner;
  }
  return e;
}

namespace detail {

inline void RefineRow(std::span<const float> w, std::span<const float> score, const Matrix& gram,
                      PruneMask& mask, size_t row, const DsnotOptions& opts, DsnotRowTrace* trace) {
  const size_t n = w.size();
  // gd = G·d for the current dropped vector d.
  std::vector<double> gd(n, 0.0);
  for (size_t j = 0; j < n; ++j) {
    if (mask.keep(row, j)) continue;
    for (size_t i = 0; i < n; ++i) gd[i] += static_cast<double>(gram(i, j)) * w[j];
  }
  double err = 0.0;
  for (size_t j = 0; j < n; ++j) {
    if (!mask.keep(row, j)) err += static_cast<double>(w[j]) * gd[j];
  }
  if (trace) trace->errors.push_back(RowReconError(w, mask, row, gram));

  size_t proposals = 0;
  bool committed = true;
  while (committed && proposals < opts.max_cycles) {
    committed = false;
    std::vector<size_t> grow, prune;
    for (size_t j = 0; j < n; ++j) (mask.keep(row, j) ? prune : grow).push_back(j);
    if (grow.empty() || prune.empty()) return;
    std::stable_sort(grow.begin(), grow.end(), [&](size_t a, size_t b) { return score[a] > score[b]; });
    std::stable_sort(prune.begin(), prune.end(), [&](size_t a, size_t b) { return score[a] < score[b]; });

    // Prune candidates available to each grow candidate, in score order.
    std::vector<std::vector<size_t>> partners(grow.size());
    if (opts.group_size > 0) {
      for (size_t gi = 0; gi < grow.size(); ++gi) {
        const size_t group = grow[gi] / opts.group_size;
        for (size_t p : prune) {
          if (p / opts.group_size == group) partners[gi].push_back(p);
        }
      }
    }
    size_t max_partners = opts.group_size > 0 ? 0 : prune.size();
    for (const auto& p : partners) max_partners = std::max(max_partners, p.size());

    // Walk (grow rank, prune rank) pairs by anti-diagonals so early proposals
    // spread over several candidates on both sides.
    for (size_t diag = 0; diag + 1 < grow.size() + max_partners && !committed; ++diag) {
      for (size_t gi = 0; gi <= diag && gi < grow.size() && !committed; ++gi) {
        const size_t pi = diag - gi;
        const auto& cand = opts.group_size > 0 ? partners[gi] : prune;
        if (pi >= cand.size()) continue;
        if (proposals >= opts.max_cycles) return;
        ++proposals;
        const size_t g = grow[gi];
        const size_t p = cand[pi];
        const double wg = w[g], wp = w[p];
        // d' = d − wg·e_g + wp·e_p
        const double delta = 2.0 * (wp * gd[p] - wg * gd[g]) + wg * wg * gram(g, g) +
                             wp * wp * gram(p, p) - 2.0 * wg * wp * gram(g, p);
        if (!(delta < 0.0) || !(err + delta < err)) continue;
        mask.set(row, g, true);
        mask.set(row, p, false);
        for (size_t i = 0; i < n; ++i) gd[i] += static_cast<double>(gram(i, p)) * wp - static_cast<double>(gram(i, g)) * wg;
        err += delta;
        committed = true;
        if (trace) trace->errors.push_back(RowReconError(w, mask, row, gram));
      }
    }
  }
}

}  // namespace detail

// Refines `mask` in place of a copy; counts per row (and per M-group) are
// unchanged by construction.
inline PruneMask DsnotRefine(const Matrix& weight, const Matrix& scores, const Matrix& gram,
                             PruneMask mask, const DsnotOptions& opts = {},
                             std::vector<DsnotRowTrace>* traces = nullptr) {
  Require(weight.rows() == mask.rows() && weight.cols() == mask.cols() &&
              scores.rows() == weight.rows() && scores.cols() == weight.cols(),
          ErrorCode::kShapeMismatch, "weight, scores and mask must share a shape");
  Require(gram.rows() == weight.cols() && gram.cols() == weight.cols(), ErrorCode::kShapeMismatch,
          "gram must be in×in");
  if (opts.group_size > 0) {
    Require(weight.cols() % opts.group_size == 0, ErrorCode::kShapeMismatch,
            "cols not divisible by group size");
  }
  if (traces) traces->assign(weight.rows(), DsnotRowTrace{});
  for (size_t r = 0; r < weight.rows(); ++r) {
    detail::RefineRow(weight.row(r), scores.row(r), gram, mask, r, opts, traces ? &(*traces)[r] : nullptr);
  }
  return mask;
}

inline PruneMask DsnotRefine(const WeightContainer& w, const std::string& layer, const StatsMap& stats,
                             PruneMask mask, const DsnotOptions& opts = {},
                             std::vector<DsnotRowTrace>* traces = nullptr) {
  auto it = stats.find(layer);
  Require(it != stats.end(), ErrorCode::kInvalidArgument, "no activation stats for " + layer);
  Require(it->second.gram.has_value(), ErrorCode::kInvalidArgument,
          "DSnoT needs Gram statistics for " + layer);
  const Matrix scores = ScoreWanda(w, layer, stats);
  return DsnotRefine(w.at(layer), scores, *it->second.gram, std::move(mask), opts, traces);
}

}  // namespace calibprune
