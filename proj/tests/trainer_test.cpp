// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "calibprune/tokenizer.hpp"
#include "calibprune/train.hpp"
#include "calibprune/weights_io.hpp"
#include "reference_model.hpp"

namespace calibprune {
namespace {

ModelConfig MicroConfig() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 8;
  return c;
}

std::vector<TokenSequence> MicroBatch() { return {{1, 4, 2, 9, 0, 3}, {10, 10, 5, 7, 1, 6}}; }

TEST(ReferenceModel, LibraryForwardMatchesDoubleOracle) {
  const WeightContainer w = InitWeights(MicroConfig(), 3, 0.5f);
  const TokenSequence seq = {1, 4, 2, 9, 0, 3};
  const Matrix got = Forward(w, seq);
  const auto want = testing::RefForward(w, seq);
  for (size_t t = 0; t < seq.size(); ++t)
    for (size_t v = 0; v < got.cols(); ++v) EXPECT_NEAR(got(t, v), want[t][v], 1e-4 * (1 + std::abs(want[t][v])));
}

TEST(LossAndGrads, LossMatchesOracle) {
  const WeightContainer w = InitWeights(MicroConfig(), 3, 0.5f);
  const auto batch = MicroBatch();
  const LossAndGrads lg = ComputeLossAndGrads(w, batch);
  EXPECT_NEAR(lg.loss, testing::RefLoss(w, batch), 1e-5);
}

// Central differences on the double-precision oracle loss, h = 1e-3, for every
// component of every tensor.
TEST(LossAndGrads, EveryComponentMatchesFiniteDifferences) {
  WeightContainer w = InitWeights(MicroConfig(), 7, 0.5f);
  const auto batch = MicroBatch();
  const LossAndGrads lg = ComputeLossAndGrads(w, batch);
  size_t checked = 0;
  for (const auto& spec : ExpectedTensors(w.config())) {
    auto flat = w.at(spec.name).flat();
    const auto grad = lg.grads.at(spec.name).flat();
    for (size_t i = 0; i < flat.size(); ++i) {
      const float orig = flat[i];
      flat[i] = orig + 1e-3f;
      const double up = testing::RefLoss(w, batch);
      const double hp = static_cast<double>(flat[i]) - orig;
      flat[i] = orig - 1e-3f;
      const double down = testing::RefLoss(w, batch);
      const double hm = orig - static_cast<double>(flat[i]);
      flat[i] = orig;
      const double fd = (up - down) / (hp + hm);
      const double err = std::abs(fd - grad[i]);
      EXPECT_TRUE(err <= 1e-4 || err <= 1e-2 * std::abs(fd))
          << spec.name << "[" << i << "] analytic " << grad[i] << " fd " << fd;
      ++checked;
    }
  }
  EXPECT_EQ(checked, w.parameter_count());
}

TEST(LossAndGrads, UntrainedLossNearUniform) {
  ModelConfig c;
  const WeightContainer w = InitWeights(c, 1);
  RngStream rng(5, 0);
  std::vector<TokenSequence> batch(4, TokenSequence(64));
  for (auto& s : batch)
    for (auto& t : s) t = static_cast<TokenId>(rng.UniformInt(256));
  const float loss = ComputeLossAndGrads(w, batch).loss;
  EXPECT_NEAR(loss, std::log(256.0), 0.05 * std::log(256.0));
}

TEST(LossAndGrads, RejectsRaggedBatch) {
  const WeightContainer w = InitWeights(MicroConfig(), 1);
  const std::vector<TokenSequence> batch = {{1, 2, 3}, {1, 2}};
  EXPECT_THROW(ComputeLossAndGrads(w, batch), Error);
  const std::vector<TokenSequence> one = {{1}};
  EXPECT_THROW(ComputeLossAndGrads(w, one), Error);
}

TEST(Adam, ZeroLearningRateLeavesWeightsBitwiseUnchanged) {
  WeightContainer w = InitWeights(MicroConfig(), 2, 0.5f);
  const WeightContainer before = w;
  const LossAndGrads lg = ComputeLossAndGrads(w, MicroBatch());
  AdamState adam(w.config());
  AdamConfig cfg;
  cfg.learning_rate = 0.0f;
  adam.Step(w, lg.grads, cfg);
  EXPECT_TRUE(BitwiseEqual(w, before));
}

TEST(Adam, FirstStepMovesEachWeightByLearningRate) {
  // With bias correction the first step is lr·g/(|g|+eps) per component.
  WeightContainer w = InitWeights(MicroConfig(), 2, 0.5f);
  const WeightContainer before = w;
  const LossAndGrads lg = ComputeLossAndGrads(w, MicroBatch());
  AdamState adam(w.config());
  adam.Step(w, lg.grads, AdamConfig{.learning_rate = 1e-2f});
  const auto g = lg.grads.at("h0.attn_q").flat();
  const auto a = before.at("h0.attn_q").flat();
  const auto b = w.at("h0.attn_q").flat();
  for (size_t i = 0; i < g.size(); ++i) {
    if (std::abs(g[i]) < 1e-5f) continue;
    EXPECT_NEAR(a[i] - b[i], std::copysign(1e-2f, g[i]), 1e-5f);
  }
}

Corpus SmallCorpus() {
  Corpus c;
  c.source_label = "small";
  for (int i = 0; i < 40; ++i) c.documents.push_back("the cat sat on the mat and the dog ran to the park. ");
  return c;
}

TEST(Train, RejectsZeroSteps) {
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(Train(InitWeights(MicroConfig(), 1), SmallCorpus(), cfg), Error);
}

TEST(Train, SameSeedIsBitwiseDeterministicAndLossFalls) {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 32;
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.seq_len = 32;
  cfg.adam.learning_rate = 3e-3f;
  cfg.seed = 9;
  std::vector<size_t> logged;
  const TrainResult a = Train(InitWeights(c, 1), SmallCorpus(), cfg, [&](size_t s, float) { logged.push_back(s); });
  const TrainResult b = Train(InitWeights(c, 1), SmallCorpus(), cfg);
  EXPECT_TRUE(BitwiseEqual(a.weights, b.weights));
  EXPECT_EQ(a.losses, b.losses);
  ASSERT_EQ(a.losses.size(), 60u);
  EXPECT_LT(a.losses.back(), a.losses.front() - 1.0f);
  EXPECT_EQ(logged, (std::vector<size_t>{1, 50}));
}

TEST(Train, DivergenceAborts) {
  ModelConfig mc = MicroConfig();
  mc.vocab_size = kByteVocabSize;
  WeightContainer w = InitWeights(mc, 1);
  w.at("unembed").flat()[0] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 1;
  cfg.seq_len = 4;
  Corpus corpus;
  corpus.documents = {std::string(50, 'x')};
  try {
    Train(w, corpus, cfg);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDiverged);
  }
}

}  // namespace
}  // namespace calibprune
