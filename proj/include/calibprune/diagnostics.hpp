// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "calibprune/error.hpp"
#include "calibprune/exact_sum.hpp"
#include "calibprune/forward.hpp"

namespace calibprune {

namespace detail {

// Runs equal-length sequences through ForwardBatch in groups and hands each
// sequence's logits (T × vocab) to `visit(index, logits)`.
template <typename Visit>
void ForEachLogits(const WeightContainer& w, std::span<const TokenSequence> data, Visit&& visit,
                   size_t group = 16) {
  std::map<size_t, std::vector<size_t>> by_len;
  for (size_t i = 0; i < data.size(); ++i) by_len[data[i].size()].push_back(i);
  for (const auto& [len, idx] : by_len) {
    for (size_t start = 0; start < idx.size(); start += group) {
      const size_t end = std::min(idx.size(), start + group);
      std::vector<TokenSequence> batch;
      for (size_t k = start; k < end; ++k) batch.push_back(data[idx[k]]);
      const Matrix logits = ForwardBatch(w, batch);
      for (size_t k = start; k < end; ++k) {
        const size_t r0 = (k - start) * len;
        Matrix one(len, logits.cols());
        std::copy_n(logits.data() + r0 * logits.cols(), len * logits.cols(), one.data());
        visit(idx[k], one);
      }
    }
  }
}

}  // namespace detail

// exp of the token-weighted mean NLL over all sequences.
inline double Perplexity(const WeightContainer& w, std::span<const TokenSequence> data) {
  Require(!data.empty(), ErrorCode::kInvalidArgument, "perplexity of an empty dataset");
  for (const auto& s : data) {
    Require(s.size() >= 2, ErrorCode::kInvalidArgument, "perplexity needs sequences of >= 2 tokens");
  }
  ExactSum total;
  size_t count = 0;
  detail::ForEachLogits(w, data, [&](size_t i, const Matrix& logits) {
    for (float v : NllFromLogits(logits, data[i])) total.Add(v);
    count += data[i].size() - 1;
  });
  return std::exp(total.Value() / static_cast<double>(count));
}

// Standardized log-probability of `next` under the next-token distribution:
// (log p(next) − μ) / σ with μ, σ the mean and standard deviation of log p
// under p itself. Zero when σ < 1e-8.
inline double MinKppFromLogits(std::span<const float> logits, TokenId next) {
  Require(next < logits.size(), ErrorCode::kOutOfRange, "token outside vocabulary");
  const auto logp = LogSoftmax(logits);
  double mu = 0.0;
  for (double lp : logp) mu += std::exp(lp) * lp;
  double var = 0.0;
  for (double lp : logp) var += std::exp(lp) * (lp - mu) * (lp - mu);
  const double sigma = std::sqrt(var);
  if (sigma < 1e-8) return 0.0;
  return (logp[next] - mu) / sigma;
}

inline double MinKppToken(const WeightContainer& w, std::span<const TokenId> prefix, TokenId next) {
  Require(!prefix.empty(), ErrorCode::kInvalidArgument, "Min-K%++ needs a non-empty prefix");
  const Matrix logits = Forward(w, prefix);
  return MinKppFromLogits(logits.row(logits.rows() - 1), next);
}

struct MinKppScore {
  double sequence_score = 0.0;
  double k_fraction = 0.5;
  std::vector<double> token_scores;
};

// Mean of the ceil(k·T) smallest token scores.
inline double BottomKMean(std::vector<double> scores, double k_fraction) {
  Require(!scores.empty(), ErrorCode::kInvalidArgument, "no token scores");
  Require(k_fraction > 0.0 && k_fraction <= 1.0, ErrorCode::kInvalidArgument, "k must be in (0, 1]");
  const auto count = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(k_fraction * static_cast<double>(scores.size()) - 1e-9)));
  std::sort(scores.begin(), scores.end());
  double sum = 0.0;
  for (size_t i = 0; i < count; ++i) sum += scores[i];
  return sum / static_cast<double>(count);
}

inline MinKppScore MinKppFromSequenceLogits(const Matrix& logits, std::span<const TokenId> tokens,
                                            double k_fraction) {
  MinKppScore out;
  out.k_fraction = k_fraction;
  for (size_t t = 1; t < tokens.size(); ++t) {
    out.token_scores.push_back(MinKppFromLogits(logits.row(t - 1), tokens[t]));
  }
  out.sequence_score = BottomKMean(out.token_scores, k_fraction);
  return out;
}

inline MinKppScore MinKppSequence(const WeightContainer& w, std::span<const TokenId> tokens,
                                  double k_fraction = 0.5) {
  Require(tokens.size() >= 2, ErrorCode::kInvalidArgument, "Min-K%++ needs >= 2 tokens");
  Require(k_fraction > 0.0 && k_fraction <= 1.0, ErrorCode::kInvalidArgument, "k must be in (0, 1]");
  return MinKppFromSequenceLogits(Forward(w, tokens), tokens, k_fraction);
}

inline std::vector<MinKppScore> MinKppBatch(const WeightContainer& w, std::span<const TokenSequence> data,
                                            double k_fraction = 0.5) {
  for (const auto& s : data) {
    Require(s.size() >= 2, ErrorCode::kInvalidArgument, "Min-K%++ needs >= 2 tokens");
  }
  std::vector<MinKppScore> out(data.size());
  detail::ForEachLogits(w, data, [&](size_t i, const Matrix& logits) {
    out[i] = MinKppFromSequenceLogits(logits, data[i], k_fraction);
  });
  return out;
}

// Probability that a random member outscores a random non-member (ties 1/2),
// computed from average ranks.
inline double Auroc(std::span<const double> positives, std::span<const double> negatives) {
  Require(!positives.empty() && !negatives.empty(), ErrorCode::kInvalidArgument,
          "AUROC needs both classes");
  std::vector<std::pair<double, int>> all;
  for (double v : positives) all.push_back({v, 1});
  for (double v : negatives) all.push_back({v, 0});
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (size_t i = 0; i < all.size();) {
    size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (size_t k = i; k < j; ++k) {
      if (all[k].second == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct SeparationReport {
  std::vector<double> member_scores;
  std::vector<double> nonmember_scores;
  double member_mean = 0.0;
  double nonmember_mean = 0.0;
  double mean_difference = 0.0;
  double auroc = 0.5;
};

inline double Mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline SeparationReport MinKppSeparation(const WeightContainer& w, std::span<const TokenSequence> members,
                                         std::span<const TokenSequence> nonmembers, double k_fraction = 0.5) {
  Require(!members.empty() && !nonmembers.empty(), ErrorCode::kInvalidArgument,
          "both member and non-member sets must be non-empty");
  SeparationReport r;
  for (const auto& s : MinKppBatch(w, members, k_fraction)) r.member_scores.push_back(s.sequence_score);
  for (const auto& s : MinKppBatch(w, nonmembers, k_fraction)) r.nonmember_scores.push_back(s.sequence_score);
  r.member_mean = Mean(r.member_scores);
  r.nonmember_mean = Mean(r.nonmember_scores);
  r.mean_difference = r.member_mean - r.nonmember_mean;
  r.auroc = Auroc(r.member_scores, r.nonmember_scores);
  return r;
}

}  // namespace calibprune
