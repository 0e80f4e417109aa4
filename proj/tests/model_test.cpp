// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "calibprune/diagnostics.hpp"
#include "calibprune/forward.hpp"
#include "calibprune/weights_io.hpp"
#include "reference_model.hpp"

namespace calibprune {
namespace {

ModelConfig SmallConfig() {
  ModelConfig c;
  c.vocab_size = 257;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_ff = 32;
  c.max_seq_len = 32;
  return c;
}

TokenSequence RandomTokens(size_t n, size_t vocab, RngStream& rng) {
  TokenSequence t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng.UniformInt(vocab));
  return t;
}

std::filesystem::path TempPath(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("calibprune_model_test_" + name);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = SmallConfig();
  EXPECT_NO_THROW(c.Validate());
  c.n_heads = 3;
  EXPECT_THROW(c.Validate(), Error);
  c = SmallConfig();
  c.max_seq_len = 1;
  EXPECT_THROW(c.Validate(), Error);
  c = SmallConfig();
  c.vocab_size = 1;
  EXPECT_THROW(c.Validate(), Error);
}

TEST(ModelConfig, DefaultDeskModelSize) {
  const WeightContainer w = InitWeights(ModelConfig{}, 0);
  EXPECT_GT(w.parameter_count(), 400'000u);
  EXPECT_LT(w.parameter_count(), 1'000'000u);
  EXPECT_EQ(PrunableLayerNames(w.config()).size(), 12u);
}

TEST(Forward, SingleTokenGivesOneRow) {
  const WeightContainer w = InitWeights(SmallConfig(), 1);
  const TokenSequence one = {5};
  const Matrix logits = Forward(w, one);
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), 257u);
}

TEST(Forward, RejectsBadInputs) {
  const WeightContainer w = InitWeights(SmallConfig(), 1);
  const TokenSequence bad_id = {1, 257};
  const TokenSequence too_long(33, 1);
  const TokenSequence empty;
  try {
    Forward(w, bad_id);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOutOfRange);
  }
  EXPECT_THROW(Forward(w, too_long), Error);
  EXPECT_THROW(Forward(w, empty), Error);
}

TEST(Forward, MatchesIndependentDoubleReference) {
  const WeightContainer w = InitWeights(SmallConfig(), 2, 0.3f);
  RngStream rng(2, 0);
  const TokenSequence t = RandomTokens(12, 257, rng);
  const Matrix got = Forward(w, t);
  const auto want = testing::RefForward(w, t);
  for (size_t i = 0; i < t.size(); ++i)
    for (size_t v = 0; v < 257; ++v) ASSERT_NEAR(got(i, v), want[i][v], 1e-4 * (1.0 + std::abs(want[i][v])));
}

TEST(Forward, PermutingLaterTokensKeepsEarlierRows) {
  const WeightContainer w = InitWeights(SmallConfig(), 3, 0.3f);
  RngStream rng(3, 0);
  TokenSequence t = RandomTokens(16, 257, rng);
  const Matrix before = Forward(w, t);
  std::reverse(t.begin() + 6, t.end());
  const Matrix after = Forward(w, t);
  for (size_t i = 0; i <= 5; ++i)
    for (size_t v = 0; v < 257; ++v) ASSERT_EQ(before(i, v), after(i, v));
}

TEST(Forward, CausalityRandomTrials) {
  const WeightContainer w = InitWeights(SmallConfig(), 4, 0.3f);
  RngStream rng(4, 0);
  for (int trial = 0; trial < 100; ++trial) {
    TokenSequence t = RandomTokens(16, 257, rng);
    const Matrix before = Forward(w, t);
    const size_t j = rng.UniformInt(16);
    t[j] = static_cast<TokenId>((t[j] + 1 + rng.UniformInt(255)) % 257);
    const Matrix after = Forward(w, t);
    for (size_t i = 0; i < 16; ++i) {
      bool same = true;
      for (size_t v = 0; v < 257; ++v) same = same && before(i, v) == after(i, v);
      if (i < j) {
        ASSERT_TRUE(same) << "row " << i << " changed after editing token " << j;
      }
      if (i == j) {
        ASSERT_FALSE(same);
      }
    }
  }
}

// With attention and MLP weights zero the residual stream is tok+pos, so the
// logits are LN_f(tok_emb[t] + pos_emb[i]) · tok_embᵀ.
TEST(Forward, ClosedFormWithZeroBlocks) {
  ModelConfig c = SmallConfig();
  WeightContainer w = InitWeights(c, 5, 0.5f);
  for (const auto& name : PrunableLayerNames(c)) w.at(name).fill(0.0f);
  w.at("unembed") = Transpose(w.at("tok_emb"));
  RngStream rng(5, 0);
  for (float& g : w.at("ln_f_g").flat()) g = static_cast<float>(1.0 + 0.2 * rng.Normal());
  for (float& b : w.at("ln_f_b").flat()) b = static_cast<float>(0.1 * rng.Normal());
  const TokenSequence t = {3, 200, 256, 17};
  const Matrix got = Forward(w, t);
  for (size_t i = 0; i < t.size(); ++i) {
    std::vector<double> x(c.d_model);
    double mean = 0, var = 0;
    for (size_t j = 0; j < c.d_model; ++j) mean += x[j] = double(w.at("tok_emb")(t[i], j)) + w.at("pos_emb")(i, j);
    mean /= c.d_model;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= c.d_model;
    for (size_t j = 0; j < c.d_model; ++j)
      x[j] = (x[j] - mean) / std::sqrt(var + 1e-5) * w.at("ln_f_g")(0, j) + w.at("ln_f_b")(0, j);
    for (size_t v = 0; v < c.vocab_size; ++v) {
      double want = 0;
      for (size_t j = 0; j < c.d_model; ++j) want += x[j] * w.at("tok_emb")(v, j);
      ASSERT_NEAR(got(i, v), want, 1e-5 * (1 + std::abs(want)));
    }
  }
}

TEST(ForwardWithTaps, NonInvasiveAndShaped) {
  const WeightContainer w = InitWeights(SmallConfig(), 6, 0.3f);
  RngStream rng(6, 0);
  const TokenSequence t = RandomTokens(10, 257, rng);
  const auto names = PrunableLayerNames(w.config());
  const TappedForward tf = ForwardWithTaps(w, t, names);
  EXPECT_TRUE(BitwiseEqual(tf.logits, Forward(w, t)));
  ASSERT_EQ(tf.taps.size(), names.size());
  for (const auto& tap : tf.taps) {
    EXPECT_EQ(tap.captured.rows(), t.size());
    EXPECT_EQ(tap.captured.cols(), w.at(tap.layer_name).cols()) << tap.layer_name;
  }
  EXPECT_EQ(tf.taps[5].layer_name, "h0.mlp_down");
  EXPECT_EQ(tf.taps[5].captured.cols(), 32u);
}

// Replaying attn_o and mlp_down taps reproduces the residual increments.
TEST(ForwardWithTaps, ReplayReproducesLayerOutput) {
  const WeightContainer w = InitWeights(SmallConfig(), 7, 0.3f);
  RngStream rng(7, 0);
  const TokenSequence t = RandomTokens(9, 257, rng);
  const std::vector<TokenSequence> batch = {t};
  ForwardCache cache;
  ForwardBatch(w, batch, &cache);
  const BlockCache& bc = cache.blocks[1];
  const TappedForward tf = ForwardWithTaps(w, t, {"h1.attn_o", "h1.mlp_up"});
  const Matrix attn_out = Matmul(tf.taps[0].captured, Transpose(w.at("h1.attn_o")));
  const Matrix up = Matmul(tf.taps[1].captured, Transpose(w.at("h1.mlp_up")));
  for (size_t i = 0; i < t.size(); ++i) {
    for (size_t j = 0; j < 16; ++j) ASSERT_NEAR(attn_out(i, j), bc.x_mid(i, j) - bc.x_in(i, j), 1e-5);
    for (size_t j = 0; j < 32; ++j) ASSERT_NEAR(up(i, j), bc.up(i, j), 1e-5);
  }
}

TEST(ForwardWithTaps, UnknownLayerRejected) {
  const WeightContainer w = InitWeights(SmallConfig(), 1);
  const TokenSequence t = {1, 2};
  EXPECT_THROW(ForwardWithTaps(w, t, {"tok_emb"}), Error);
  EXPECT_THROW(ForwardWithTaps(w, t, {"h9.attn_q"}), Error);
}

TEST(NllPerToken, UniformModel) {
  ModelConfig c = SmallConfig();
  c.vocab_size = 256;
  const WeightContainer w = ZeroWeights(c);
  const TokenSequence t = {1, 2, 3, 250, 7};
  const auto nll = NllPerToken(w, t);
  ASSERT_EQ(nll.size(), 4u);
  for (float v : nll) EXPECT_NEAR(v, 5.545177f, 1e-5);
}

TEST(NllPerToken, NonNegativeAndRejectsShort) {
  const WeightContainer w = InitWeights(SmallConfig(), 8, 1.0f);
  RngStream rng(8, 0);
  for (float v : NllPerToken(w, RandomTokens(20, 257, rng))) EXPECT_GE(v, 0.0f);
  const TokenSequence one = {3};
  EXPECT_THROW(NllPerToken(w, one), Error);
}

TEST(Perplexity, UntrainedModelNearVocabSize) {
  ModelConfig c;
  const WeightContainer w = InitWeights(c, 9);
  RngStream rng(9, 0);
  std::vector<TokenSequence> data;
  for (int i = 0; i < 8; ++i) data.push_back(RandomTokens(64, 256, rng));
  const double ppl = Perplexity(w, data);
  EXPECT_GT(ppl, 0.8 * 256);
  EXPECT_LT(ppl, 1.2 * 256);
}

TEST(IncrementalDecoder, MatchesFullForward) {
  const WeightContainer w = InitWeights(SmallConfig(), 10, 0.3f);
  RngStream rng(10, 0);
  const TokenSequence t = RandomTokens(20, 257, rng);
  const Matrix full = Forward(w, t);
  IncrementalDecoder dec(w);
  for (size_t i = 0; i < t.size(); ++i) {
    const auto row = dec.Step(t[i]);
    for (size_t v = 0; v < 257; ++v) ASSERT_NEAR(row[v], full(i, v), 1e-5);
  }
  EXPECT_EQ(dec.position(), 20u);
}

TEST(WeightsIo, RoundTripIsBitwise) {
  const WeightContainer w = InitWeights(SmallConfig(), 11);
  const auto path = TempPath("rt.bin");
  SaveWeights(w, path.string());
  const WeightContainer back = LoadWeights(path.string());
  EXPECT_TRUE(BitwiseEqual(w, back));
  EXPECT_EQ(back.config().d_ff, 32u);
  std::filesystem::remove(path);
}

ErrorCode CodeOf(const std::string& bytes) {
  try {
    DeserializeWeights(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::kIo;
}

TEST(WeightsIo, DistinctErrors) {
  const std::string good = SerializeWeights(InitWeights(SmallConfig(), 12));
  EXPECT_EQ(CodeOf(good.substr(0, good.size() - 4)), ErrorCode::kTruncatedPayload);
  EXPECT_EQ(CodeOf(good.substr(0, 5)), ErrorCode::kMalformedHeader);
  std::string garbage = good;
  garbage[9] = '#';
  EXPECT_EQ(CodeOf(garbage), ErrorCode::kMalformedHeader);

  WeightContainer nan = InitWeights(SmallConfig(), 12);
  std::string bytes = SerializeWeights(nan);
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + bytes.size() - 4, &q, 4);
  EXPECT_EQ(CodeOf(bytes), ErrorCode::kNonFinite);
}

TEST(WeightsIo, ShapeMismatchDetected) {
  WeightContainer w = InitWeights(SmallConfig(), 13);
  w.set("h0.attn_q", Matrix(16, 15));
  EXPECT_THROW(SaveWeights(w, TempPath("bad.bin").string()), Error);
  try {
    w.Validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(WeightsIo, HeaderLayout) {
  const std::string bytes = SerializeWeights(InitWeights(SmallConfig(), 14));
  uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[i]);
  const auto header = nlohmann::json::parse(bytes.substr(8, n));
  ASSERT_TRUE(header.contains("__config__"));
  EXPECT_EQ(header["__config__"]["d_model"], 16);
  EXPECT_EQ(header["tok_emb"]["dtype"], "f32");
  EXPECT_EQ(header["tok_emb"]["shape"], nlohmann::json::array({257, 16}));
  size_t total = 0;
  for (const auto& [name, d] : header.items()) {
    if (name == "__config__") continue;
    total += d["shape"][0].get<size_t>() * d["shape"][1].get<size_t>() * 4;
  }
  EXPECT_EQ(bytes.size(), 8 + n + total);
}

TEST(LinearNames, ParseAndShapes) {
  const ModelConfig c = SmallConfig();
  const auto id = ParseLinearName("h1.mlp_down", c);
  ASSERT_TRUE(id.has_value());
  EXPECT_EQ(id->block, 1u);
  EXPECT_EQ(id->kind, LinearKind::kMlpDown);
  EXPECT_FALSE(ParseLinearName("h2.attn_q", c).has_value());
  EXPECT_FALSE(ParseLinearName("h0.ln1_g", c).has_value());
  EXPECT_EQ(LinearShape(c, LinearKind::kMlpUp).first, 32u);
  EXPECT_EQ(LinearShape(c, LinearKind::kMlpUp).second, 16u);
}

}  // namespace
}  // namespace calibprune
