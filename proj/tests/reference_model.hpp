// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Straight-line double-precision forward pass, written independently of the
// library forward. Used as an oracle for logits and finite differences.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "calibprune/model.hpp"

namespace calibprune::testing {

using DMat = std::vector<std::vector<double>>;

inline DMat Get(const WeightContainer& w, const std::string& name) {
  const Matrix& m = w.at(name);
  DMat out(m.rows(), std::vector<double>(m.cols()));
  for (size_t i = 0; i < m.rows(); ++i)
    for (size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

// y[t] = W x[t] for W stored out×in.
inline DMat Apply(const DMat& x, const DMat& w) {
  DMat y(x.size(), std::vector<double>(w.size(), 0.0));
  for (size_t t = 0; t < x.size(); ++t)
    for (size_t o = 0; o < w.size(); ++o)
      for (size_t i = 0; i < w[o].size(); ++i) y[t][o] += w[o][i] * x[t][i];
  return y;
}

inline DMat RefLayerNorm(const DMat& x, const DMat& g, const DMat& b) {
  DMat y = x;
  for (size_t t = 0; t < x.size(); ++t) {
    const double n = static_cast<double>(x[t].size());
    double mean = 0.0;
    for (double v : x[t]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x[t]) var += (v - mean) * (v - mean);
    var /= n;
    for (size_t j = 0; j < x[t].size(); ++j)
      y[t][j] = (x[t][j] - mean) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
  }
  return y;
}

inline double RefGelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
}

// Logits (T × vocab) for one sequence.
inline DMat RefForward(const WeightContainer& w, const std::vector<uint32_t>& tokens) {
  const ModelConfig& c = w.config();
  const size_t T = tokens.size(), d = c.d_model, hd = d / c.n_heads;
  const DMat tok = Get(w, "tok_emb"), pos = Get(w, "pos_emb");
  DMat x(T, std::vector<double>(d));
  for (size_t t = 0; t < T; ++t)
    for (size_t j = 0; j < d; ++j) x[t][j] = tok[tokens[t]][j] + pos[t][j];
  for (size_t b = 0; b < c.n_layers; ++b) {
    const std::string p = "h" + std::to_string(b) + ".";
    const DMat a = RefLayerNorm(x, Get(w, p + "ln1_g"), Get(w, p + "ln1_b"));
    const DMat q = Apply(a, Get(w, p + "attn_q")), k = Apply(a, Get(w, p + "attn_k")),
               v = Apply(a, Get(w, p + "attn_v"));
    DMat ctx(T, std::vector<double>(d, 0.0));
    for (size_t h = 0; h < c.n_heads; ++h) {
      for (size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (size_t e = 0; e < hd; ++e) dot += q[i][h * hd + e] * k[j][h * hd + e];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& v2 : s) z += (v2 = std::exp(v2 - mx));
        for (size_t j = 0; j <= i; ++j)
          for (size_t e = 0; e < hd; ++e) ctx[i][h * hd + e] += s[j] / z * v[j][h * hd + e];
      }
    }
    const DMat o = Apply(ctx, Get(w, p + "attn_o"));
    for (size_t t = 0; t < T; ++t)
      for (size_t j = 0; j < d; ++j) x[t][j] += o[t][j];
    const DMat m = RefLayerNorm(x, Get(w, p + "ln2_g"), Get(w, p + "ln2_b"));
    DMat u = Apply(m, Get(w, p + "mlp_up"));
    for (auto& row : u)
      for (auto& v2 : row) v2 = RefGelu(v2);
    const DMat dn = Apply(u, Get(w, p + "mlp_down"));
    for (size_t t = 0; t < T; ++t)
      for (size_t j = 0; j < d; ++j) x[t][j] += dn[t][j];
  }
  const DMat hf = RefLayerNorm(x, Get(w, "ln_f_g"), Get(w, "ln_f_b"));
  const DMat un = Get(w, "unembed");  // d × V
  DMat logits(T, std::vector<double>(c.vocab_size, 0.0));
  for (size_t t = 0; t < T; ++t)
    for (size_t vv = 0; vv < c.vocab_size; ++vv)
      for (size_t j = 0; j < d; ++j) logits[t][vv] += hf[t][j] * un[j][vv];
  return logits;
}

// Mean next-token NLL over a batch.
inline double RefLoss(const WeightContainer& w, const std::vector<std::vector<uint32_t>>& batch) {
  double total = 0.0;
  size_t count = 0;
  for (const auto& seq : batch) {
    const DMat lg = RefForward(w, seq);
    for (size_t t = 0; t + 1 < seq.size(); ++t) {
      double mx = -1e300;
      for (double v : lg[t]) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : lg[t]) z += std::exp(v - mx);
      total += -(lg[t][seq[t + 1]] - mx - std::log(z));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace calibprune::testing
