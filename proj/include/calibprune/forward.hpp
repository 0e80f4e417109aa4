// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Forward pass of the fixed pre-norm decoder:
//
//   x  = tok_emb[ids] + pos_emb[0..T)
//   per block:
//     a  = LN1(x);   q,k,v = a·Wqᵀ, a·Wkᵀ, a·Wvᵀ
//     c  = causal multi-head attention(q, k, v)
//     x += c·Woᵀ
//     m  = LN2(x);   u = m·Wupᵀ;  g = GELU(u)
//     x += g·Wdownᵀ
//   logits = LN_f(x)·unembed
//
// Tap points (inputs of the prunable linears): attn_q/k/v <- a, attn_o <- c,
// mlp_up <- m, mlp_down <- g.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "calibprune/error.hpp"
#include "calibprune/model.hpp"
#include "calibprune/tensor.hpp"

namespace calibprune {

using TokenId = uint32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr float kLayerNormEps = 1e-5f;

struct LayerNormCache {
  std::vector<float> mean;
  std::vector<float> rstd;
};

struct BlockCache {
  Matrix x_in;
  Matrix ln1_out;
  LayerNormCache ln1;
  Matrix q, k, v;
  // probs[(seq * n_heads + head)] is a T×T row-stochastic causal matrix.
  std::vector<Matrix> probs;
  Matrix ctx;
  Matrix x_mid;
  Matrix ln2_out;
  LayerNormCache ln2;
  Matrix up;
  Matrix act;
};

// Intermediate activations of one batched forward pass; filled on request and
// consumed by the backward pass and by activation taps.
struct ForwardCache {
  size_t batch = 0;
  size_t seq_len = 0;
  std::vector<BlockCache> blocks;
  Matrix x_final;
  Matrix lnf_out;
  LayerNormCache lnf;
};

struct ActivationTap {
  std::string layer_name;
  Matrix captured;  // tokens × input channels of the layer
};

namespace detail {

inline Matrix LayerNorm(const Matrix& x, const Matrix& gain, const Matrix& bias,
                        LayerNormCache* cache) {
  const size_t d = x.cols();
  Matrix y(x.rows(), d);
  if (cache) {
    cache->mean.assign(x.rows(), 0.0f);
    cache->rstd.assign(x.rows(), 0.0f);
  }
  for (size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double sum = 0.0;
    for (float v : row) sum += v;
    const double mean = sum / static_cast<double>(d);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const float mean_f = static_cast<float>(mean);
    const float rstd = static_cast<float>(1.0 / std::sqrt(var + kLayerNormEps));
    auto out = y.row(i);
    for (size_t j = 0; j < d; ++j) {
      out[j] = (row[j] - mean_f) * rstd * gain(0, j) + bias(0, j);
    }
    if (cache) {
      cache->mean[i] = mean_f;
      cache->rstd[i] = rstd;
    }
  }
  return y;
}

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

// Tanh-approximate GELU, 0.5·u·(1 + tanh(z)), evaluated as u·σ(2z).
inline float Gelu(float u) {
  const float z = kGeluC * (u + 0.044715f * u * u * u);
  return u / (1.0f + std::exp(-2.0f * z));
}

inline float GeluGrad(float u) {
  const float z = kGeluC * (u + 0.044715f * u * u * u);
  const float s = 1.0f / (1.0f + std::exp(-2.0f * z));
  const float dz = kGeluC * (1.0f + 3.0f * 0.044715f * u * u);
  return s + 2.0f * u * s * (1.0f - s) * dz;
}

inline Matrix CopyColumns(const Matrix& m, size_t row_begin, size_t rows, size_t col_begin,
                          size_t cols) {
  Matrix out(rows, cols);
  for (size_t i = 0; i < rows; ++i) {
    const auto src = m.row(row_begin + i);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(col_begin), cols, out.row(i).begin());
  }
  return out;
}

// In-place causal softmax of row i over columns 0..limit-1; columns >= limit
// are set to zero.
inline void CausalSoftmaxRow(std::span<float> row, size_t limit) {
  float max_v = row[0];
  for (size_t j = 1; j < limit; ++j) max_v = std::max(max_v, row[j]);
  float sum = 0.0f;
  for (size_t j = 0; j < limit; ++j) {
    row[j] = std::exp(row[j] - max_v);
    sum += row[j];
  }
  const float inv = 1.0f / sum;
  for (size_t j = 0; j < limit; ++j) row[j] *= inv;
  for (size_t j = limit; j < row.size(); ++j) row[j] = 0.0f;
}

inline void AddInPlace(Matrix& a, const Matrix& b) {
  auto af = a.flat();
  const auto bf = b.flat();
  for (size_t i = 0; i < af.size(); ++i) af[i] += bf[i];
}

inline void ValidateTokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  Require(!tokens.empty(), ErrorCode::kInvalidArgument, "empty token sequence");
  Require(tokens.size() <= cfg.max_seq_len, ErrorCode::kOutOfRange,
          "sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
              std::to_string(cfg.max_seq_len));
  for (TokenId t : tokens) {
    Require(t < cfg.vocab_size, ErrorCode::kOutOfRange,
            "token id " + std::to_string(t) + " >= vocab_size " + std::to_string(cfg.vocab_size));
  }
}

}  // namespace detail

// Batched forward over `batch` equal-length sequences (rows concatenated,
// sequence-major). Returns logits of shape (batch·T) × vocab.
inline Matrix ForwardBatch(const WeightContainer& w, std::span<const TokenSequence> batch,
                           ForwardCache* cache = nullptr) {
  const ModelConfig& cfg = w.config();
  Require(!batch.empty(), ErrorCode::kInvalidArgument, "empty batch");
  const size_t seq_len = batch[0].size();
  for (const auto& seq : batch) {
    Require(seq.size() == seq_len, ErrorCode::kShapeMismatch, "ragged batch");
    detail::ValidateTokens(cfg, seq);
  }
  const size_t d = cfg.d_model;
  const size_t heads = cfg.n_heads;
  const size_t hd = cfg.head_dim();
  const size_t rows = batch.size() * seq_len;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  const Matrix& tok_emb = w.at("tok_emb");
  const Matrix& pos_emb = w.at("pos_emb");
  Matrix x(rows, d);
  for (size_t s = 0; s < batch.size(); ++s) {
    for (size_t t = 0; t < seq_len; ++t) {
      auto out = x.row(s * seq_len + t);
      const auto te = tok_emb.row(batch[s][t]);
      const auto pe = pos_emb.row(t);
      for (size_t j = 0; j < d; ++j) out[j] = te[j] + pe[j];
    }
  }
  if (cache) {
    cache->batch = batch.size();
    cache->seq_len = seq_len;
    cache->blocks.assign(cfg.n_layers, BlockCache{});
  }

  for (size_t b = 0; b < cfg.n_layers; ++b) {
    const std::string p = BlockPrefix(b);
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[b] : local;
    if (cache) bc.x_in = x;

    bc.ln1_out = detail::LayerNorm(x, w.at(p + "ln1_g"), w.at(p + "ln1_b"), cache ? &bc.ln1 : nullptr);
    bc.q = MatmulTransposed(bc.ln1_out, w.at(p + "attn_q"));
    bc.k = MatmulTransposed(bc.ln1_out, w.at(p + "attn_k"));
    bc.v = MatmulTransposed(bc.ln1_out, w.at(p + "attn_v"));

    bc.ctx = Matrix(rows, d);
    if (cache) bc.probs.assign(batch.size() * heads, Matrix{});
    for (size_t s = 0; s < batch.size(); ++s) {
      const size_t r0 = s * seq_len;
      for (size_t h = 0; h < heads; ++h) {
        const Matrix qh = detail::CopyColumns(bc.q, r0, seq_len, h * hd, hd);
        const Matrix kh = detail::CopyColumns(bc.k, r0, seq_len, h * hd, hd);
        const Matrix vh = detail::CopyColumns(bc.v, r0, seq_len, h * hd, hd);
        Matrix scores = MatmulTransposed(qh, kh);
        for (size_t i = 0; i < seq_len; ++i) {
          auto row = scores.row(i);
          for (float& sv : row) sv *= scale;
          detail::CausalSoftmaxRow(row, i + 1);
        }
        const Matrix ch = Matmul(scores, vh);
        for (size_t i = 0; i < seq_len; ++i) {
          std::copy_n(ch.row(i).begin(), hd, bc.ctx.row(r0 + i).begin() + static_cast<std::ptrdiff_t>(h * hd));
        }
        if (cache) bc.probs[s * heads + h] = std::move(scores);
      }
    }
    detail::AddInPlace(x, MatmulTransposed(bc.ctx, w.at(p + "attn_o")));
    if (cache) bc.x_mid = x;

    bc.ln2_out = detail::LayerNorm(x, w.at(p + "ln2_g"), w.at(p + "ln2_b"), cache ? &bc.ln2 : nullptr);
    bc.up = MatmulTransposed(bc.ln2_out, w.at(p + "mlp_up"));
    bc.act = Matrix(bc.up.rows(), bc.up.cols());
    for (size_t i = 0; i < bc.up.size(); ++i) bc.act.flat()[i] = detail::Gelu(bc.up.flat()[i]);
    detail::AddInPlace(x, MatmulTransposed(bc.act, w.at(p + "mlp_down")));
  }

  LayerNormCache lnf_local;
  Matrix lnf_out = detail::LayerNorm(x, w.at("ln_f_g"), w.at("ln_f_b"), cache ? &cache->lnf : &lnf_local);
  Matrix logits = Matmul(lnf_out, w.at("unembed"));
  if (cache) {
    cache->x_final = std::move(x);
    cache->lnf_out = std::move(lnf_out);
  }
  return logits;
}

// Logits (T × vocab) for one sequence.
inline Matrix Forward(const WeightContainer& w, std::span<const TokenId> tokens) {
  detail::ValidateTokens(w.config(), tokens);
  const TokenSequence seq(tokens.begin(), tokens.end());
  return ForwardBatch(w, std::span<const TokenSequence>(&seq, 1));
}

// Returns the matrix each named layer right-multiplies in this pass.
inline Matrix TapFor(const ForwardCache& cache, const LinearId& id) {
  const BlockCache& bc = cache.blocks.at(id.block);
  switch (id.kind) {
    case LinearKind::kAttnQ:
    case LinearKind::kAttnK:
    case LinearKind::kAttnV: return bc.ln1_out;
    case LinearKind::kAttnO: return bc.ctx;
    case LinearKind::kMlpUp: return bc.ln2_out;
    case LinearKind::kMlpDown: return bc.act;
  }
  return {};
}

struct TappedForward {
  Matrix logits;
  std::vector<ActivationTap> taps;
};

inline TappedForward ForwardWithTaps(const WeightContainer& w, std::span<const TokenId> tokens,
                                     const std::vector<std::string>& layer_names) {
  std::vector<LinearId> ids;
  for (const auto& name : layer_names) {
    auto id = ParseLinearName(name, w.config());
    Require(id.has_value(), ErrorCode::kInvalidArgument, "not a prunable layer: '" + name + "'");
    ids.push_back(*id);
  }
  detail::ValidateTokens(w.config(), tokens);
  const TokenSequence seq(tokens.begin(), tokens.end());
  ForwardCache cache;
  TappedForward out;
  out.logits = ForwardBatch(w, std::span<const TokenSequence>(&seq, 1), &cache);
  for (size_t i = 0; i < ids.size(); ++i) out.taps.push_back({layer_names[i], TapFor(cache, ids[i])});
  return out;
}

// Natural-log negative log-likelihood of each next token; length T-1.
inline std::vector<float> NllFromLogits(const Matrix& logits, std::span<const TokenId> tokens) {
  std::vector<float> nll(tokens.size() - 1);
  for (size_t i = 0; i + 1 < tokens.size(); ++i) {
    const auto logp = LogSoftmax(logits.row(i));
    nll[i] = static_cast<float>(-logp[tokens[i + 1]]);
  }
  return nll;
}

inline std::vector<float> NllPerToken(const WeightContainer& w, std::span<const TokenId> tokens) {
  Require(tokens.size() >= 2, ErrorCode::kInvalidArgument, "need at least 2 tokens for NLL");
  return NllFromLogits(Forward(w, tokens), tokens);
}

// Token-by-token decoder with cached keys and values. Produces the same
// logits as Forward() on the growing prefix.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const WeightContainer& w) : w_(w) {
    const ModelConfig& cfg = w.config();
    for (size_t b = 0; b < cfg.n_layers; ++b) {
      Layer layer;
      const std::string p = BlockPrefix(b);
      layer.wq_t = Transpose(w.at(p + "attn_q"));
      layer.wk_t = Transpose(w.at(p + "attn_k"));
      layer.wv_t = Transpose(w.at(p + "attn_v"));
      layer.wo_t = Transpose(w.at(p + "attn_o"));
      layer.up_t = Transpose(w.at(p + "mlp_up"));
      layer.down_t = Transpose(w.at(p + "mlp_down"));
      layer.keys = Matrix(cfg.max_seq_len, cfg.d_model);
      layer.values = Matrix(cfg.max_seq_len, cfg.d_model);
      layers_.push_back(std::move(layer));
    }
  }

  size_t position() const noexcept { return pos_; }

  void Reset() { pos_ = 0; }

  // Feeds one token and returns the next-token logits.
  std::vector<float> Step(TokenId token) {
    const ModelConfig& cfg = w_.config();
    Require(pos_ < cfg.max_seq_len, ErrorCode::kOutOfRange, "decoder exceeded max_seq_len");
    Require(token < cfg.vocab_size, ErrorCode::kOutOfRange, "token id out of range");
    const size_t d = cfg.d_model;
    const size_t hd = cfg.head_dim();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    Matrix x(1, d);
    const auto te = w_.at("tok_emb").row(token);
    const auto pe = w_.at("pos_emb").row(pos_);
    for (size_t j = 0; j < d; ++j) x(0, j) = te[j] + pe[j];

    for (size_t b = 0; b < cfg.n_layers; ++b) {
      const std::string p = BlockPrefix(b);
      Layer& L = layers_[b];
      const Matrix a = detail::LayerNorm(x, w_.at(p + "ln1_g"), w_.at(p + "ln1_b"), nullptr);
      const Matrix q = Matmul(a, L.wq_t);
      const Matrix k = Matmul(a, L.wk_t);
      const Matrix v = Matmul(a, L.wv_t);
      std::copy_n(k.data(), d, L.keys.row(pos_).begin());
      std::copy_n(v.data(), d, L.values.row(pos_).begin());
      Matrix ctx(1, d);
      const size_t n = pos_ + 1;
      for (size_t h = 0; h < cfg.n_heads; ++h) {
        const Matrix qh = detail::CopyColumns(q, 0, 1, h * hd, hd);
        const Matrix kh = detail::CopyColumns(L.keys, 0, n, h * hd, hd);
        const Matrix vh = detail::CopyColumns(L.values, 0, n, h * hd, hd);
        Matrix scores = MatmulTransposed(qh, kh);
        for (float& sv : scores.flat()) sv *= scale;
        detail::CausalSoftmaxRow(scores.row(0), n);
        const Matrix ch = Matmul(scores, vh);
        std::copy_n(ch.data(), hd, ctx.row(0).begin() + static_cast<std::ptrdiff_t>(h * hd));
      }
      detail::AddInPlace(x, Matmul(ctx, L.wo_t));
      const Matrix m = detail::LayerNorm(x, w_.at(p + "ln2_g"), w_.at(p + "ln2_b"), nullptr);
      Matrix u = Matmul(m, L.up_t);
      for (float& uv : u.flat()) uv = detail::Gelu(uv);
      detail::AddInPlace(x, Matmul(u, L.down_t));
    }
    const Matrix hf = detail::LayerNorm(x, w_.at("ln_f_g"), w_.at("ln_f_b"), nullptr);
    const Matrix logits = Matmul(hf, w_.at("unembed"));
    ++pos_;
    return logits.values();
  }

 private:
  struct Layer {
    Matrix wq_t, wk_t, wv_t, wo_t, up_t, down_t;
    Matrix keys, values;
  };
  const WeightContainer& w_;
  std::vector<Layer> layers_;
  size_t pos_ = 0;
};

}  // namespace calibprune
