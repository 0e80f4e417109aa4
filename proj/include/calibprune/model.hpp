// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calibprune/error.hpp"
#include "calibprune/rng.hpp"
#include "calibprune/tensor.hpp"

namespace calibprune {

struct ModelConfig {
  size_t vocab_size = 257;
  size_t d_model = 128;
  size_t n_layers = 2;
  size_t n_heads = 4;
  size_t d_ff = 512;
  size_t max_seq_len = 512;

  size_t head_dim() const { return d_model / n_heads; }

  void Validate() const {
    Require(vocab_size >= 2, ErrorCode::kInvalidArgument, "vocab_size must be >= 2");
    Require(max_seq_len >= 2, ErrorCode::kInvalidArgument, "max_seq_len must be >= 2");
    Require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
            ErrorCode::kInvalidArgument, "d_model must be divisible by n_heads");
    Require(n_layers > 0 && d_ff > 0, ErrorCode::kInvalidArgument,
            "n_layers and d_ff must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The six prunable linear matrices of a block, all stored [out × in] and
// applied as y = x·Wᵀ.
enum class LinearKind { kAttnQ, kAttnK, kAttnV, kAttnO, kMlpUp, kMlpDown };

inline constexpr std::array<LinearKind, 6> kLinearKinds = {
    LinearKind::kAttnQ, LinearKind::kAttnK,  LinearKind::kAttnV,
    LinearKind::kAttnO, LinearKind::kMlpUp, LinearKind::kMlpDown};

inline std::string_view LinearKindName(LinearKind kind) {
  switch (kind) {
    case LinearKind::kAttnQ: return "attn_q";
    case LinearKind::kAttnK: return "attn_k";
    case LinearKind::kAttnV: return "attn_v";
    case LinearKind::kAttnO: return "attn_o";
    case LinearKind::kMlpUp: return "mlp_up";
    case LinearKind::kMlpDown: return "mlp_down";
  }
  return "";
}

inline std::string BlockPrefix(size_t block) { return "h" + std::to_string(block) + "."; }

inline std::string LinearName(size_t block, LinearKind kind) {
  return BlockPrefix(block) + std::string(LinearKindName(kind));
}

struct LinearId {
  size_t block;
  LinearKind kind;
};

// Parses "h<block>.<kind>"; nullopt for non-prunable or malformed names.
inline std::optional<LinearId> ParseLinearName(std::string_view name, const ModelConfig& cfg) {
  if (name.size() < 3 || name[0] != 'h') return std::nullopt;
  const size_t dot = name.find('.');
  if (dot == std::string_view::npos || dot == 1) return std::nullopt;
  size_t block = 0;
  for (size_t i = 1; i < dot; ++i) {
    if (name[i] < '0' || name[i] > '9') return std::nullopt;
    block = block * 10 + static_cast<size_t>(name[i] - '0');
  }
  if (block >= cfg.n_layers) return std::nullopt;
  const std::string_view rest = name.substr(dot + 1);
  for (LinearKind kind : kLinearKinds) {
    if (rest == LinearKindName(kind)) return LinearId{block, kind};
  }
  return std::nullopt;
}

inline std::pair<size_t, size_t> LinearShape(const ModelConfig& cfg, LinearKind kind) {
  switch (kind) {
    case LinearKind::kMlpUp: return {cfg.d_ff, cfg.d_model};
    case LinearKind::kMlpDown: return {cfg.d_model, cfg.d_ff};
    default: return {cfg.d_model, cfg.d_model};
  }
}

// Names of all prunable layers in canonical (block-major) order.
inline std::vector<std::string> PrunableLayerNames(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    for (LinearKind kind : kLinearKinds) names.push_back(LinearName(b, kind));
  }
  return names;
}

struct TensorSpec {
  std::string name;
  size_t rows;
  size_t cols;
};

// Every tensor of the architecture with its shape, in canonical order.
inline std::vector<TensorSpec> ExpectedTensors(const ModelConfig& cfg) {
  std::vector<TensorSpec> specs;
  specs.push_back({"tok_emb", cfg.vocab_size, cfg.d_model});
  specs.push_back({"pos_emb", cfg.max_seq_len, cfg.d_model});
  for (size_t b = 0; b < cfg.n_layers; ++b) {
    const std::string p = BlockPrefix(b);
    specs.push_back({p + "ln1_g", 1, cfg.d_model});
    specs.push_back({p + "ln1_b", 1, cfg.d_model});
    for (LinearKind kind : {LinearKind::kAttnQ, LinearKind::kAttnK, LinearKind::kAttnV,
                            LinearKind::kAttnO}) {
      const auto [r, c] = LinearShape(cfg, kind);
      specs.push_back({LinearName(b, kind), r, c});
    }
    specs.push_back({p + "ln2_g", 1, cfg.d_model});
    specs.push_back({p + "ln2_b", 1, cfg.d_model});
    for (LinearKind kind : {LinearKind::kMlpUp, LinearKind::kMlpDown}) {
      const auto [r, c] = LinearShape(cfg, kind);
      specs.push_back({LinearName(b, kind), r, c});
    }
  }
  specs.push_back({"ln_f_g", 1, cfg.d_model});
  specs.push_back({"ln_f_b", 1, cfg.d_model});
  specs.push_back({"unembed", cfg.d_model, cfg.vocab_size});
  return specs;
}

// Named f32 tensors of one model. Treated as immutable once built; pruning and
// training produce new containers.
class WeightContainer {
 public:
  WeightContainer() = default;
  explicit WeightContainer(ModelConfig config) : config_(config) {}

  const ModelConfig& config() const noexcept { return config_; }

  const Matrix& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) Fail(ErrorCode::kOutOfRange, "no tensor named '" + name + "'");
    return it->second;
  }
  Matrix& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) Fail(ErrorCode::kOutOfRange, "no tensor named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  void set(const std::string& name, Matrix m) { tensors_[name] = std::move(m); }

  const std::map<std::string, Matrix>& tensors() const noexcept { return tensors_; }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& [_, m] : tensors_) n += m.size();
    return n;
  }

  // Checks names, shapes and finiteness against the config.
  void Validate() const {
    config_.Validate();
    const auto specs = ExpectedTensors(config_);
    Require(specs.size() == tensors_.size(), ErrorCode::kShapeMismatch,
            "expected " + std::to_string(specs.size()) + " tensors, found " +
                std::to_string(tensors_.size()));
    for (const auto& spec : specs) {
      auto it = tensors_.find(spec.name);
      Require(it != tensors_.end(), ErrorCode::kShapeMismatch, "missing tensor " + spec.name);
      Require(it->second.rows() == spec.rows && it->second.cols() == spec.cols,
              ErrorCode::kShapeMismatch,
              spec.name + " has shape " + it->second.shape_string() + ", expected [" +
                  std::to_string(spec.rows) + "x" + std::to_string(spec.cols) + "]");
      Require(it->second.all_finite(), ErrorCode::kNonFinite, spec.name);
    }
  }

  friend bool operator==(const WeightContainer& a, const WeightContainer& b) {
    return a.config_ == b.config_ && a.tensors_ == b.tensors_;
  }

 private:
  ModelConfig config_;
  std::map<std::string, Matrix> tensors_;
};

inline bool BitwiseEqual(const WeightContainer& a, const WeightContainer& b) {
  if (!(a.config() == b.config()) || a.tensors().size() != b.tensors().size()) return false;
  for (const auto& [name, m] : a.tensors()) {
    if (!b.contains(name) || !BitwiseEqual(m, b.at(name))) return false;
  }
  return true;
}

// All-zero container with the right shapes (also used for gradients).
inline WeightContainer ZeroWeights(const ModelConfig& cfg) {
  cfg.Validate();
  WeightContainer w(cfg);
  for (const auto& spec : ExpectedTensors(cfg)) w.set(spec.name, Matrix(spec.rows, spec.cols));
  return w;
}

// GPT-style init: N(0, init_std) for matrices, unit gains, zero biases.
inline WeightContainer InitWeights(const ModelConfig& cfg, uint64_t seed, float init_std = 0.02f) {
  WeightContainer w = ZeroWeights(cfg);
  RngStream rng(seed, 0);
  for (const auto& spec : ExpectedTensors(cfg)) {
    Matrix& m = w.at(spec.name);
    const bool is_gain = spec.name.ends_with("_g");
    const bool is_bias = spec.name.ends_with("_b");
    for (float& v : m.flat()) {
      if (is_gain) v = 1.0f;
      else if (is_bias) v = 0.0f;
      else v = static_cast<float>(rng.Normal() * init_std);
    }
  }
  return w;
}

}  // namespace calibprune
