// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Self-generated calibration data: take the first t tokens of a corpus sample
// as a prefix, let the dense model continue it to N tokens, and drop the
// highest-perplexity fraction of the generated samples.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <span>
#include <vector>

#include "calibprune/corpus.hpp"
#include "calibprune/error.hpp"
#include "calibprune/forward.hpp"
#include "calibprune/parallel.hpp"
#include "calibprune/rng.hpp"

namespace calibprune {

struct GenerationConfig {
  size_t prefix_len = 4;
  size_t max_len = 256;
  size_t top_k = 50;  // 0 disables
  float top_p = 0.95f;
  float temperature = 0.6f;
  float repetition_penalty = 1.2f;
  // Score only the generated continuation instead of the whole sequence.
  bool continuation_only_ppl = false;

  void Validate() const {
    Require(prefix_len < max_len, ErrorCode::kInvalidArgument, "prefix_len must be < max_len");
    Require(top_p > 0.0f && top_p <= 1.0f, ErrorCode::kInvalidArgument, "top_p must be in (0, 1]");
    Require(temperature > 0.0f, ErrorCode::kInvalidArgument, "temperature must be > 0");
    Require(repetition_penalty >= 1.0f, ErrorCode::kInvalidArgument, "repetition_penalty must be >= 1");
  }
};

struct GeneratedSample {
  TokenSequence ids;
  size_t prefix_len = 0;
  float perplexity = 0.0f;
};

struct TokenProb {
  TokenId token;
  double prob;
};

// Positive logits are divided by the penalty, negative ones multiplied, for
// every distinct id in `history`. penalty == 1 leaves logits untouched.
inline void ApplyRepetitionPenalty(std::span<float> logits, std::span<const TokenId> history,
                                   float penalty) {
  if (penalty == 1.0f) return;
  std::vector<bool> seen(logits.size(), false);
  for (TokenId id : history) {
    if (id >= logits.size() || seen[id]) continue;
    seen[id] = true;
    float& l = logits[id];
    l = l > 0.0f ? l / penalty : l * penalty;
  }
}

// Smallest prefix of the descending-sorted distribution whose cumulative mass
// reaches top_p (boundary token included), renormalized.
inline std::vector<TokenProb> TopPSupport(std::vector<TokenProb> dist, double top_p) {
  std::stable_sort(dist.begin(), dist.end(),
                   [](const TokenProb& a, const TokenProb& b) { return a.prob > b.prob; });
  double total = 0.0;
  for (const auto& tp : dist) total += tp.prob;
  double cum = 0.0;
  size_t keep = dist.size();
  for (size_t i = 0; i < dist.size(); ++i) {
    cum += dist[i].prob / total;
    if (cum >= top_p) {
      keep = i + 1;
      break;
    }
  }
  while (keep > 1 && dist[keep - 1].prob <= 0.0) --keep;
  dist.resize(keep);
  double kept = 0.0;
  for (const auto& tp : dist) kept += tp.prob;
  for (auto& tp : dist) tp.prob /= kept;
  return dist;
}

// Truncated next-token distribution: penalty, temperature, top-k, top-p.
inline std::vector<TokenProb> NextTokenSupport(std::vector<float> logits,
                                               std::span<const TokenId> history,
                                               const GenerationConfig& cfg) {
  ApplyRepetitionPenalty(logits, history, cfg.repetition_penalty);
  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
  if (cfg.top_k > 0 && cfg.top_k < order.size()) order.resize(cfg.top_k);
  double max_l = logits[order[0]] / static_cast<double>(cfg.temperature);
  std::vector<TokenProb> dist;
  dist.reserve(order.size());
  double sum = 0.0;
  for (TokenId t : order) {
    const double e = std::exp(logits[t] / static_cast<double>(cfg.temperature) - max_l);
    dist.push_back({t, e});
    sum += e;
  }
  for (auto& tp : dist) tp.prob /= sum;
  return TopPSupport(std::move(dist), cfg.top_p);
}

inline TokenId SampleFromSupport(const std::vector<TokenProb>& support, RngStream& rng) {
  const double u = rng.NextDouble();
  double cum = 0.0;
  for (const auto& tp : support) {
    cum += tp.prob;
    if (u < cum) return tp.token;
  }
  return support.back().token;
}

inline float SequencePerplexity(const WeightContainer& w, std::span<const TokenId> ids,
                                size_t skip_predictions = 0) {
  const auto nll = NllPerToken(w, ids);
  double sum = 0.0;
  size_t count = 0;
  for (size_t i = std::min(skip_predictions, nll.size() - 1); i < nll.size(); ++i) {
    sum += nll[i];
    ++count;
  }
  return static_cast<float>(std::exp(sum / static_cast<double>(count)));
}

// prefix_len == 0 starts from BOS alone; the BOS token occupies position 0 of
// the returned sequence.
inline GeneratedSample GenerateOne(const WeightContainer& w, std::span<const TokenId> prefix,
                                   const GenerationConfig& cfg, RngStream& rng) {
  cfg.Validate();
  Require(prefix.size() == cfg.prefix_len, ErrorCode::kInvalidArgument,
          "prefix has " + std::to_string(prefix.size()) + " tokens, expected " +
              std::to_string(cfg.prefix_len));
  Require(cfg.max_len <= w.config().max_seq_len, ErrorCode::kOutOfRange,
          "max_len exceeds model max_seq_len");
  GeneratedSample sample;
  sample.prefix_len = cfg.prefix_len;
  if (cfg.prefix_len == 0) {
    Require(w.config().vocab_size > kBosId, ErrorCode::kInvalidArgument,
            "prefix_len 0 needs a BOS id in the vocabulary");
    sample.ids.push_back(kBosId);
  } else {
    sample.ids.assign(prefix.begin(), prefix.end());
  }
  IncrementalDecoder decoder(w);
  std::vector<float> logits;
  for (TokenId t : sample.ids) logits = decoder.Step(t);
  while (sample.ids.size() < cfg.max_len) {
    const auto support = NextTokenSupport(logits, sample.ids, cfg);
    const TokenId next = cfg.top_k == 1 ? support.front().token : SampleFromSupport(support, rng);
    sample.ids.push_back(next);
    if (sample.ids.size() < cfg.max_len) logits = decoder.Step(next);
  }
  // NLL entry i scores token i+1; continuation tokens start at max(t, 1).
  const size_t skip = cfg.continuation_only_ppl ? std::max<size_t>(cfg.prefix_len, 1) - 1 : 0;
  sample.perplexity = SequencePerplexity(w, sample.ids, skip);
  return sample;
}

// Sources of generation prefixes: the first t tokens of a document drawn
// uniformly among documents with at least t tokens.
class PrefixSource {
 public:
  PrefixSource(const Corpus& corpus, size_t prefix_len) : prefix_len_(prefix_len) {
    if (prefix_len == 0) return;
    for (const auto& doc : corpus.documents) {
      if (doc.size() >= prefix_len) prefixes_.push_back(Encode(std::string_view(doc).substr(0, prefix_len)));
    }
    Require(!prefixes_.empty(), ErrorCode::kInvalidArgument,
            "corpus '" + corpus.source_label + "' has no document with >= " + std::to_string(prefix_len) +
                " tokens for prefixes");
  }

  TokenSequence Draw(RngStream& rng) const {
    if (prefix_len_ == 0) return {};
    return prefixes_[rng.UniformInt(prefixes_.size())];
  }

 private:
  size_t prefix_len_;
  std::vector<TokenSequence> prefixes_;
};

// Sample i draws its prefix from rng.Derive(2i) and its continuation from
// rng.Derive(2i+1), so output does not depend on worker scheduling.
inline std::vector<GeneratedSample> GenerateSet(const WeightContainer& w, const Corpus& corpus,
                                                size_t count, const GenerationConfig& cfg,
                                                const RngStream& rng, size_t jobs = 1) {
  cfg.Validate();
  std::vector<GeneratedSample> out(count);
  if (count == 0) return out;
  const PrefixSource source(corpus, cfg.prefix_len);
  ParallelFor(count, jobs, [&](size_t i) {
    RngStream prefix_rng = rng.Derive(2 * i);
    RngStream gen_rng = rng.Derive(2 * i + 1);
    out[i] = GenerateOne(w, source.Draw(prefix_rng), cfg, gen_rng);
  });
  return out;
}

// Removes the ceil(rate·n) highest-perplexity samples; among equal
// perplexities the earlier sample is kept. Survivors keep input order.
inline std::vector<GeneratedSample> PerplexityFilter(const std::vector<GeneratedSample>& samples,
                                                     double rate = 0.20) {
  Require(rate >= 0.0 && rate < 1.0, ErrorCode::kInvalidArgument, "filter rate must be in [0, 1)");
  const size_t n = samples.size();
  const auto drop = static_cast<size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return samples[a].perplexity < samples[b].perplexity;
  });
  std::vector<bool> keep(n, false);
  for (size_t i = 0; i < n - drop; ++i) keep[order[i]] = true;
  std::vector<GeneratedSample> out;
  out.reserve(n - drop);
  for (size_t i = 0; i < n; ++i) {
    if (keep[i]) out.push_back(samples[i]);
  }
  return out;
}

inline CalibrationSet ToCalibrationSet(const std::vector<GeneratedSample>& samples, uint64_t seed,
                                       std::string source_label) {
  CalibrationSet set;
  set.provenance = Provenance::kSelfGenerated;
  set.seed = seed;
  set.source_label = std::move(source_label);
  for (const auto& s : samples) {
    set.sequences.push_back(s.ids);
    set.perplexities.push_back(s.perplexity);
  }
  return set;
}

inline std::vector<GeneratedSample> FromCalibrationSet(const CalibrationSet& set, size_t prefix_len) {
  Require(set.perplexities.size() == set.sequences.size(), ErrorCode::kMissingField,
          "calibration set has no per-sequence perplexity");
  std::vector<GeneratedSample> samples;
  for (size_t i = 0; i < set.sequences.size(); ++i) {
    samples.push_back({set.sequences[i], prefix_len, set.perplexities[i]});
  }
  return samples;
}

}  // namespace calibprune
