// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Hand-derived backward pass for the fixed decoder, and an Adam training loop.
// Gradients follow the forward in forward.hpp line by line; the finite-
// difference test in tests/ is the check on every term here.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calibprune/corpus.hpp"
#include "calibprune/error.hpp"
#include "calibprune/forward.hpp"
#include "calibprune/model.hpp"
#include "calibprune/rng.hpp"
#include "calibprune/tensor.hpp"

namespace calibprune {

struct LossAndGrads {
  float loss = 0.0f;
  WeightContainer grads;
};

namespace detail {

// Given dy for y = LN(x), accumulates dgain/dbias and returns dx.
inline Matrix LayerNormBackward(const Matrix& dy, const Matrix& x, const Matrix& gain,
                                const LayerNormCache& cache, Matrix& dgain, Matrix& dbias) {
  const size_t d = x.cols();
  Matrix dx(x.rows(), d);
  std::vector<float> xhat(d), dxhat(d);
  for (size_t i = 0; i < x.rows(); ++i) {
    const float mean = cache.mean[i];
    const float rstd = cache.rstd[i];
    const auto xr = x.row(i);
    const auto dyr = dy.row(i);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (size_t j = 0; j < d; ++j) {
      xhat[j] = (xr[j] - mean) * rstd;
      dxhat[j] = dyr[j] * gain(0, j);
      dgain(0, j) += dyr[j] * xhat[j];
      dbias(0, j) += dyr[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += static_cast<double>(dxhat[j]) * xhat[j];
    }
    const float m1 = static_cast<float>(sum_dxhat / static_cast<double>(d));
    const float m2 = static_cast<float>(sum_dxhat_xhat / static_cast<double>(d));
    auto dxr = dx.row(i);
    for (size_t j = 0; j < d; ++j) dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
  }
  return dx;
}

inline void AddTo(Matrix& dst, const Matrix& src) {
  auto d = dst.flat();
  const auto s = src.flat();
  for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// dW for y = x·Wᵀ given dy: dyᵀ·x.
inline Matrix WeightGrad(const Matrix& dy, const Matrix& x) { return Matmul(Transpose(dy), x); }

}  // namespace detail

// Mean next-token cross-entropy over the batch and its gradient with respect
// to every tensor. All sequences must have length seq_len (>= 2).
inline LossAndGrads ComputeLossAndGrads(const WeightContainer& w, std::span<const TokenSequence> batch) {
  Require(!batch.empty(), ErrorCode::kInvalidArgument, "empty batch");
  const size_t seq_len = batch[0].size();
  Require(seq_len >= 2, ErrorCode::kInvalidArgument, "training sequences need >= 2 tokens");
  const ModelConfig& cfg = w.config();
  ForwardCache cache;
  const Matrix logits = ForwardBatch(w, batch, &cache);
  const size_t rows = logits.rows();
  const size_t vocab = cfg.vocab_size;
  const size_t d = cfg.d_model;
  const size_t hd = cfg.head_dim();
  const size_t heads = cfg.n_heads;
  const size_t predictions = batch.size() * (seq_len - 1);
  const float inv_pred = 1.0f / static_cast<float>(predictions);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  LossAndGrads out;
  out.grads = ZeroWeights(cfg);
  WeightContainer& g = out.grads;

  Matrix dlogits(rows, vocab);
  double loss = 0.0;
  for (size_t s = 0; s < batch.size(); ++s) {
    for (size_t t = 0; t + 1 < seq_len; ++t) {
      const size_t r = s * seq_len + t;
      const auto logp = LogSoftmax(logits.row(r));
      const TokenId target = batch[s][t + 1];
      loss -= logp[target];
      auto dr = dlogits.row(r);
      for (size_t v = 0; v < vocab; ++v) dr[v] = static_cast<float>(std::exp(logp[v])) * inv_pred;
      dr[target] -= inv_pred;
    }
  }
  out.loss = static_cast<float>(loss / static_cast<double>(predictions));

  g.at("unembed") = Matmul(Transpose(cache.lnf_out), dlogits);
  const Matrix dh = MatmulTransposed(dlogits, w.at("unembed"));
  Matrix dx = detail::LayerNormBackward(dh, cache.x_final, w.at("ln_f_g"), cache.lnf, g.at("ln_f_g"),
                                        g.at("ln_f_b"));

  for (size_t bi = cfg.n_layers; bi-- > 0;) {
    const std::string p = BlockPrefix(bi);
    const BlockCache& bc = cache.blocks[bi];

    // MLP: x_out = x_mid + GELU(LN2(x_mid)·Wupᵀ)·Wdownᵀ
    g.at(p + "mlp_down") = detail::WeightGrad(dx, bc.act);
    Matrix du = Matmul(dx, w.at(p + "mlp_down"));
    for (size_t i = 0; i < du.size(); ++i) du.flat()[i] *= detail::GeluGrad(bc.up.flat()[i]);
    g.at(p + "mlp_up") = detail::WeightGrad(du, bc.ln2_out);
    const Matrix dm = Matmul(du, w.at(p + "mlp_up"));
    Matrix dx_mid = dx;
    detail::AddTo(dx_mid, detail::LayerNormBackward(dm, bc.x_mid, w.at(p + "ln2_g"), bc.ln2,
                                                    g.at(p + "ln2_g"), g.at(p + "ln2_b")));

    // Attention: x_mid = x_in + attn(LN1(x_in))·Woᵀ
    g.at(p + "attn_o") = detail::WeightGrad(dx_mid, bc.ctx);
    const Matrix dctx = Matmul(dx_mid, w.at(p + "attn_o"));
    Matrix dq(rows, d), dk(rows, d), dv(rows, d);
    for (size_t s = 0; s < batch.size(); ++s) {
      const size_t r0 = s * seq_len;
      for (size_t h = 0; h < heads; ++h) {
        const Matrix& probs = bc.probs[s * heads + h];
        const Matrix qh = detail::CopyColumns(bc.q, r0, seq_len, h * hd, hd);
        const Matrix kh = detail::CopyColumns(bc.k, r0, seq_len, h * hd, hd);
        const Matrix vh = detail::CopyColumns(bc.v, r0, seq_len, h * hd, hd);
        const Matrix dch = detail::CopyColumns(dctx, r0, seq_len, h * hd, hd);
        const Matrix dprobs = MatmulTransposed(dch, vh);
        const Matrix dvh = Matmul(Transpose(probs), dch);
        Matrix dscores(seq_len, seq_len);
        for (size_t i = 0; i < seq_len; ++i) {
          const auto pr = probs.row(i);
          const auto dpr = dprobs.row(i);
          double dot = 0.0;
          for (size_t j = 0; j <= i; ++j) dot += static_cast<double>(pr[j]) * dpr[j];
          auto dsr = dscores.row(i);
          for (size_t j = 0; j <= i; ++j) dsr[j] = pr[j] * (dpr[j] - static_cast<float>(dot)) * scale;
        }
        const Matrix dqh = Matmul(dscores, kh);
        const Matrix dkh = Matmul(Transpose(dscores), qh);
        for (size_t i = 0; i < seq_len; ++i) {
          for (size_t j = 0; j < hd; ++j) {
            dq(r0 + i, h * hd + j) = dqh(i, j);
            dk(r0 + i, h * hd + j) = dkh(i, j);
            dv(r0 + i, h * hd + j) = dvh(i, j);
          }
        }
      }
    }
    g.at(p + "attn_q") = detail::WeightGrad(dq, bc.ln1_out);
    g.at(p + "attn_k") = detail::WeightGrad(dk, bc.ln1_out);
    g.at(p + "attn_v") = detail::WeightGrad(dv, bc.ln1_out);
    Matrix da = Matmul(dq, w.at(p + "attn_q"));
    detail::AddTo(da, Matmul(dk, w.at(p + "attn_k")));
    detail::AddTo(da, Matmul(dv, w.at(p + "attn_v")));
    dx = std::move(dx_mid);
    detail::AddTo(dx, detail::LayerNormBackward(da, bc.x_in, w.at(p + "ln1_g"), bc.ln1,
                                                g.at(p + "ln1_g"), g.at(p + "ln1_b")));
  }

  Matrix& dtok = g.at("tok_emb");
  Matrix& dpos = g.at("pos_emb");
  for (size_t s = 0; s < batch.size(); ++s) {
    for (size_t t = 0; t < seq_len; ++t) {
      const auto dr = dx.row(s * seq_len + t);
      auto te = dtok.row(batch[s][t]);
      auto pe = dpos.row(t);
      for (size_t j = 0; j < d; ++j) {
        te[j] += dr[j];
        pe[j] += dr[j];
      }
    }
  }
  return out;
}

struct AdamConfig {
  float learning_rate = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class AdamState {
 public:
  explicit AdamState(const ModelConfig& cfg) : m_(ZeroWeights(cfg)), v_(ZeroWeights(cfg)) {}

  size_t steps() const noexcept { return step_; }

  // In-place bias-corrected Adam update.
  void Step(WeightContainer& w, const WeightContainer& grads, const AdamConfig& cfg) {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(step_));
    for (const auto& spec : ExpectedTensors(w.config())) {
      auto wf = w.at(spec.name).flat();
      const auto gf = grads.at(spec.name).flat();
      auto mf = m_.at(spec.name).flat();
      auto vf = v_.at(spec.name).flat();
      for (size_t i = 0; i < wf.size(); ++i) {
        mf[i] = cfg.beta1 * mf[i] + (1.0f - cfg.beta1) * gf[i];
        vf[i] = cfg.beta2 * vf[i] + (1.0f - cfg.beta2) * gf[i] * gf[i];
        const double mhat = mf[i] / bc1;
        const double vhat = vf[i] / bc2;
        wf[i] -= static_cast<float>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps));
      }
    }
  }

 private:
  WeightContainer m_;
  WeightContainer v_;
  size_t step_ = 0;
};

struct TrainConfig {
  size_t steps = 2000;
  size_t batch_size = 16;
  size_t seq_len = 128;
  AdamConfig adam;
  uint64_t seed = 0;
  size_t log_every = 50;

  void Validate() const {
    Require(steps >= 1, ErrorCode::kInvalidArgument, "steps must be >= 1");
    Require(batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
    Require(seq_len >= 2, ErrorCode::kInvalidArgument, "seq_len must be >= 2");
    Require(adam.learning_rate > 0.0f, ErrorCode::kInvalidArgument, "learning_rate must be > 0");
    Require(adam.beta1 > 0.0f && adam.beta1 < 1.0f && adam.beta2 > 0.0f && adam.beta2 < 1.0f,
            ErrorCode::kInvalidArgument, "Adam betas must be in (0, 1)");
  }
};

struct TrainResult {
  WeightContainer weights;
  std::vector<float> losses;  // one per step
};

using TrainLogger = std::function<void(size_t step, float loss)>;

// Batches are windows drawn from the corpus joined with BOS separators, from
// RngStream(seed, 1); deterministic given the config.
inline TrainResult Train(WeightContainer w, const Corpus& corpus, const TrainConfig& cfg,
                         const TrainLogger& log = {}) {
  cfg.Validate();
  Require(cfg.seq_len <= w.config().max_seq_len, ErrorCode::kInvalidArgument, "seq_len exceeds max_seq_len");
  const WindowSource source(corpus, cfg.seq_len, SampleOptions{.concat = true});
  RngStream rng(cfg.seed, 1);
  AdamState adam(w.config());
  TrainResult result;
  result.losses.reserve(cfg.steps);
  std::vector<TokenSequence> batch(cfg.batch_size);
  for (size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& seq : batch) seq = source.Draw(rng);
    LossAndGrads lg = ComputeLossAndGrads(w, batch);
    if (!std::isfinite(lg.loss)) {
      Fail(ErrorCode::kDiverged, "loss became " + std::to_string(lg.loss) + " at step " + std::to_string(step));
    }
    adam.Step(w, lg.grads, cfg.adam);
    result.losses.push_back(lg.loss);
    if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1)) log(step, lg.loss);
  }
  result.weights = std::move(w);
  return result;
}

}  // namespace calibprune
