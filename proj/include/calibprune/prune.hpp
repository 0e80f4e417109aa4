// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Activation statistics, importance scores, mask construction and mask
// application for the prunable linear layers.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibprune/corpus.hpp"
#include "calibprune/error.hpp"
#include "calibprune/exact_sum.hpp"
#include "calibprune/forward.hpp"
#include "calibprune/model.hpp"
#include "calibprune/tensor.hpp"

namespace calibprune {

// ---------------------------------------------------------------------------
// Activation statistics

struct ActivationStats {
  std::string layer_name;
  // Σ x_j² over every calibration token, per input channel.
  std::vector<double> sq_norm_acc;
  size_t token_count = 0;
  // Σ xᵀx over calibration tokens (input × input); present when requested.
  std::optional<Matrix> gram;

  // ||X_j||_2, the activation norm used by Wanda scores.
  std::vector<float> channel_norms() const {
    std::vector<float> out(sq_norm_acc.size());
    for (size_t j = 0; j < out.size(); ++j) out[j] = static_cast<float>(std::sqrt(sq_norm_acc[j]));
    return out;
  }
};

using StatsMap = std::map<std::string, ActivationStats>;

// Splits sequences longer than max_seq_len into consecutive chunks.
inline std::vector<TokenSequence> ChunkSequences(const std::vector<TokenSequence>& seqs,
                                                 size_t max_seq_len) {
  std::vector<TokenSequence> chunks;
  for (const auto& s : seqs) {
    for (size_t start = 0; start < s.size(); start += max_seq_len) {
      const size_t end = std::min(s.size(), start + max_seq_len);
      chunks.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(start),
                          s.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return chunks;
}

// Accumulates statistics of one tap over activation chunks. Per-chunk partial
// sums are formed in token order and combined with an exact sum, so squared
// norms do not depend on the order chunks are added in.
class StatsAccumulator {
 public:
  explicit StatsAccumulator(bool with_gram = false) : with_gram_(with_gram) {}

  void Add(const Matrix& x) {
    if (sq_.empty()) {
      sq_.resize(x.cols());
      if (with_gram_) gram_.assign(x.cols() * x.cols(), 0.0);
    }
    Require(x.cols() == sq_.size(), ErrorCode::kShapeMismatch, "activation width changed");
    tokens_ += x.rows();
    std::vector<double> partial(x.cols(), 0.0);
    for (size_t t = 0; t < x.rows(); ++t) {
      const auto row = x.row(t);
      for (size_t j = 0; j < x.cols(); ++j) partial[j] += static_cast<double>(row[j]) * row[j];
    }
    for (size_t j = 0; j < x.cols(); ++j) sq_[j].Add(partial[j]);
    if (with_gram_) {
      const Matrix g = Matmul(Transpose(x), x);
      for (size_t i = 0; i < g.size(); ++i) gram_[i] += g.flat()[i];
    }
  }

  ActivationStats Finish(std::string layer_name) const {
    ActivationStats s;
    s.layer_name = std::move(layer_name);
    s.token_count = tokens_;
    s.sq_norm_acc.resize(sq_.size());
    for (size_t j = 0; j < sq_.size(); ++j) s.sq_norm_acc[j] = sq_[j].Value();
    if (with_gram_) {
      const size_t n = sq_.size();
      Matrix g(n, n);
      for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
          g(i, j) = static_cast<float>(0.5 * (gram_[i * n + j] + gram_[j * n + i]));
        }
      }
      s.gram = std::move(g);
    }
    return s;
  }

 private:
  bool with_gram_;
  size_t tokens_ = 0;
  std::vector<ExactSum> sq_;
  std::vector<double> gram_;
};

inline StatsMap CollectStats(const WeightContainer& w, const CalibrationSet& calib,
                             bool with_gram = false) {
  Require(!calib.sequences.empty(), ErrorCode::kInvalidArgument, "empty calibration set");
  const ModelConfig& cfg = w.config();
  // q/k/v share their input, so one accumulator per distinct tap.
  const std::vector<LinearKind> distinct = {LinearKind::kAttnQ, LinearKind::kAttnO,
                                            LinearKind::kMlpUp, LinearKind::kMlpDown};
  std::map<std::pair<size_t, LinearKind>, StatsAccumulator> acc;
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    for (LinearKind kind : distinct) acc.emplace(std::pair{b, kind}, StatsAccumulator(with_gram));
  }
  for (const auto& chunk : ChunkSequences(calib.sequences, cfg.max_seq_len)) {
    ForwardCache cache;
    ForwardBatch(w, std::span<const TokenSequence>(&chunk, 1), &cache);
    for (auto& [key, a] : acc) a.Add(TapFor(cache, {key.first, key.second}));
  }
  StatsMap out;
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    for (LinearKind kind : kLinearKinds) {
      const LinearKind source =
          (kind == LinearKind::kAttnK || kind == LinearKind::kAttnV) ? LinearKind::kAttnQ : kind;
      out.emplace(LinearName(b, kind), acc.at({b, source}).Finish(LinearName(b, kind)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Importance scores

inline Matrix ScoreMagnitude(const Matrix& weight) {
  Matrix s(weight.rows(), weight.cols());
  for (size_t i = 0; i < weight.size(); ++i) s.flat()[i] = std::abs(weight.flat()[i]);
  return s;
}

inline Matrix ScoreWanda(const Matrix& weight, std::span<const float> channel_norms) {
  Require(channel_norms.size() == weight.cols(), ErrorCode::kShapeMismatch,
          "channel norm count " + std::to_string(channel_norms.size()) + " != weight cols " +
              std::to_string(weight.cols()));
  Matrix s(weight.rows(), weight.cols());
  for (size_t i = 0; i < weight.rows(); ++i) {
    for (size_t j = 0; j < weight.cols(); ++j) s(i, j) = std::abs(weight(i, j)) * channel_norms[j];
  }
  return s;
}

inline Matrix ScoreWanda(const WeightContainer& w, const std::string& layer, const StatsMap& stats) {
  auto it = stats.find(layer);
  Require(it != stats.end(), ErrorCode::kInvalidArgument, "no activation stats for " + layer);
  const auto norms = it->second.channel_norms();
  return ScoreWanda(w.at(layer), norms);
}

// ---------------------------------------------------------------------------
// Masks

class PruneMask {
 public:
  PruneMask() = default;
  PruneMask(std::string layer_name, size_t rows, size_t cols, uint8_t fill = 1)
      : layer_name_(std::move(layer_name)), rows_(rows), cols_(cols), keep_(rows * cols, fill) {}

  const std::string& layer_name() const noexcept { return layer_name_; }
  void set_layer_name(std::string name) { layer_name_ = std::move(name); }
  size_t rows() const noexcept { return rows_; }
  size_t cols() const noexcept { return cols_; }
  bool keep(size_t r, size_t c) const noexcept { return keep_[r * cols_ + c] != 0; }
  void set(size_t r, size_t c, bool v) noexcept { keep_[r * cols_ + c] = v ? 1 : 0; }
  const std::vector<uint8_t>& bits() const noexcept { return keep_; }

  size_t kept_count() const {
    return static_cast<size_t>(std::count(keep_.begin(), keep_.end(), uint8_t{1}));
  }
  size_t kept_in_row(size_t r) const {
    return static_cast<size_t>(std::count(keep_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                                          keep_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_),
                                          uint8_t{1}));
  }
  double sparsity() const {
    return keep_.empty() ? 0.0 : 1.0 - static_cast<double>(kept_count()) / static_cast<double>(keep_.size());
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;

 private:
  std::string layer_name_;
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<uint8_t> keep_;
};

enum class ComparisonGroup { kPerRow, kPerLayer };

// floor(s·count) without the 0.3·10 = 2.9999… trap.
inline size_t FloorFraction(double s, size_t count) {
  return static_cast<size_t>(std::floor(s * static_cast<double>(count) + 1e-9));
}

namespace detail {

// Indices [begin, end) ordered by ascending score, lower index first on ties.
inline std::vector<size_t> AscendingOrder(std::span<const float> scores, size_t begin, size_t end) {
  std::vector<size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace detail

// Drops the floor(s·group_size) lowest-scoring entries of each comparison
// group; among equal scores the lower flat index is dropped first.
inline PruneMask BuildMaskUnstructured(const Matrix& scores, double s,
                                       ComparisonGroup group = ComparisonGroup::kPerRow,
                                       std::string layer_name = {}) {
  Require(s >= 0.0 && s < 1.0, ErrorCode::kInvalidArgument, "sparsity must be in [0, 1)");
  PruneMask mask(std::move(layer_name), scores.rows(), scores.cols());
  const auto flat = scores.flat();
  if (group == ComparisonGroup::kPerRow) {
    const size_t drop = FloorFraction(s, scores.cols());
    for (size_t r = 0; r < scores.rows(); ++r) {
      const auto order = detail::AscendingOrder(flat, r * scores.cols(), (r + 1) * scores.cols());
      for (size_t k = 0; k < drop; ++k) mask.set(r, order[k] - r * scores.cols(), false);
    }
  } else {
    const size_t drop = FloorFraction(s, scores.size());
    const auto order = detail::AscendingOrder(flat, 0, scores.size());
    for (size_t k = 0; k < drop; ++k) mask.set(order[k] / scores.cols(), order[k] % scores.cols(), false);
  }
  return mask;
}

// Keeps the n highest scores in every aligned group of m consecutive input
// columns; ties keep the lower column.
inline PruneMask BuildMaskNM(const Matrix& scores, size_t n, size_t m, std::string layer_name = {}) {
  Require(m > 0 && n < m, ErrorCode::kInvalidArgument, "N:M requires N < M");
  Require(scores.cols() % m == 0, ErrorCode::kShapeMismatch,
          "cols " + std::to_string(scores.cols()) + " not divisible by M=" + std::to_string(m));
  PruneMask mask(std::move(layer_name), scores.rows(), scores.cols(), 0);
  std::vector<size_t> idx(m);
  for (size_t r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    for (size_t g = 0; g < scores.cols(); g += m) {
      std::iota(idx.begin(), idx.end(), g);
      std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return row[a] > row[b]; });
      for (size_t k = 0; k < n; ++k) mask.set(r, idx[k], true);
    }
  }
  return mask;
}

inline bool SatisfiesNM(const PruneMask& mask, size_t n, size_t m) {
  if (m == 0 || mask.cols() % m != 0) return false;
  for (size_t r = 0; r < mask.rows(); ++r) {
    for (size_t g = 0; g < mask.cols(); g += m) {
      size_t kept = 0;
      for (size_t c = g; c < g + m; ++c) kept += mask.keep(r, c) ? 1 : 0;
      if (kept != n) return false;
    }
  }
  return true;
}

inline Matrix ApplyMask(const Matrix& weight, const PruneMask& mask) {
  Require(weight.rows() == mask.rows() && weight.cols() == mask.cols(), ErrorCode::kShapeMismatch,
          "mask for " + mask.layer_name() + " does not match weight " + weight.shape_string());
  Matrix out = weight;
  for (size_t i = 0; i < out.size(); ++i) {
    if (!mask.bits()[i]) out.flat()[i] = 0.0f;
  }
  return out;
}

// Ŵ = W ⊙ keep for each masked layer; everything else copied unchanged.
inline WeightContainer ApplyMasks(const WeightContainer& w, const std::vector<PruneMask>& masks) {
  WeightContainer out = w;
  for (const auto& mask : masks) {
    Require(ParseLinearName(mask.layer_name(), w.config()).has_value(), ErrorCode::kInvalidArgument,
            "not a prunable layer: '" + mask.layer_name() + "'");
    out.set(mask.layer_name(), ApplyMask(w.at(mask.layer_name()), mask));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction error ||W Xᵀ − Ŵ Xᵀ||_F

inline double ReconErrorSquared(const Matrix& weight, const Matrix& pruned, const Matrix& x) {
  Require(weight.rows() == pruned.rows() && weight.cols() == pruned.cols(), ErrorCode::kShapeMismatch,
          "weight/pruned shape mismatch");
  Matrix diff(weight.rows(), weight.cols());
  for (size_t i = 0; i < diff.size(); ++i) diff.flat()[i] = weight.flat()[i] - pruned.flat()[i];
  const Matrix y = MatmulTransposed(x, diff);
  double acc = 0.0;
  for (float v : y.flat()) acc += static_cast<double>(v) * v;
  return acc;
}

inline float ReconError(const Matrix& weight, const Matrix& pruned, const Matrix& x) {
  return static_cast<float>(std::sqrt(ReconErrorSquared(weight, pruned, x)));
}

// Activations are captured from the dense model `w`.
inline float LayerReconError(const WeightContainer& w, const WeightContainer& pruned,
                             const std::string& layer, const CalibrationSet& calib) {
  Require(w.config() == pruned.config(), ErrorCode::kShapeMismatch, "containers differ in config");
  const auto id = ParseLinearName(layer, w.config());
  Require(id.has_value(), ErrorCode::kInvalidArgument, "not a prunable layer: '" + layer + "'");
  double total = 0.0;
  for (const auto& chunk : ChunkSequences(calib.sequences, w.config().max_seq_len)) {
    ForwardCache cache;
    ForwardBatch(w, std::span<const TokenSequence>(&chunk, 1), &cache);
    total += ReconErrorSquared(w.at(layer), pruned.at(layer), TapFor(cache, *id));
  }
  return static_cast<float>(std::sqrt(total));
}

// ---------------------------------------------------------------------------
// Mask export: {"layer":name,"pattern":"unstructured"|"N:M","keep":RLE}
// where RLE is {"shape":[r,c],"start":0|1,"runs":[...]} over the row-major
// bitmap, runs alternating between the two values beginning with `start`.

inline nlohmann::ordered_json EncodeMaskRle(const PruneMask& mask) {
  nlohmann::ordered_json j;
  j["shape"] = {mask.rows(), mask.cols()};
  const auto& bits = mask.bits();
  j["start"] = bits.empty() ? 1 : static_cast<int>(bits[0]);
  std::vector<size_t> runs;
  size_t i = 0;
  while (i < bits.size()) {
    size_t k = i;
    while (k < bits.size() && bits[k] == bits[i]) ++k;
    runs.push_back(k - i);
    i = k;
  }
  j["runs"] = runs;
  return j;
}

inline PruneMask DecodeMaskRle(const nlohmann::json& j, std::string layer_name) {
  try {
    const size_t rows = j.at("shape").at(0).get<size_t>();
    const size_t cols = j.at("shape").at(1).get<size_t>();
    int value = j.at("start").get<int>();
    PruneMask mask(std::move(layer_name), rows, cols, 0);
    size_t pos = 0;
    for (const auto& run : j.at("runs")) {
      const size_t len = run.get<size_t>();
      Require(pos + len <= rows * cols, ErrorCode::kParse, "mask runs exceed shape");
      for (size_t k = 0; k < len; ++k, ++pos) mask.set(pos / cols, pos % cols, value != 0);
      value = 1 - value;
    }
    Require(pos == rows * cols, ErrorCode::kParse, "mask runs do not cover shape");
    return mask;
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, std::string("mask: ") + e.what());
  }
}

inline void WriteMasks(const std::vector<PruneMask>& masks, const std::string& pattern, std::ostream& out) {
  for (const auto& mask : masks) {
    nlohmann::ordered_json j;
    j["layer"] = mask.layer_name();
    j["pattern"] = pattern;
    j["keep"] = EncodeMaskRle(mask);
    out << j.dump() << '\n';
  }
}

inline std::vector<PruneMask> ReadMasks(std::istream& in) {
  std::vector<PruneMask> masks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kParse, e.what());
    }
    masks.push_back(DecodeMaskRle(j.at("keep"), j.at("layer").get<std::string>()));
  }
  return masks;
}

}  // namespace calibprune
