// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "calibprune/corpus.hpp"
#include "calibprune/fixture.hpp"

namespace calibprune {
namespace {

Corpus Parse(const std::string& text) {
  std::istringstream in(text);
  return ParseCorpus(in, "t");
}

ErrorCode ParseError(const std::string& text, std::string* what = nullptr) {
  try {
    Parse(text);
  } catch (const Error& e) {
    if (what) *what = e.what();
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::kIo;
}

TEST(LoadCorpus, DropsEmptyTexts) {
  const Corpus c = Parse("{\"text\":\"a\"}\n{\"text\":\"\"}\n{\"text\":\"b\"}\n");
  EXPECT_EQ(c.documents, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(c.source_label, "t");
}

TEST(LoadCorpus, MissingFieldNamesLine) {
  std::string what;
  EXPECT_EQ(ParseError("{\"txt\":\"x\"}\n", &what), ErrorCode::kMissingField);
  EXPECT_NE(what.find("line 1"), std::string::npos);
}

TEST(LoadCorpus, InvalidJsonNamesLine) {
  std::string what;
  EXPECT_EQ(ParseError("{\"text\":\"a\"}\n{oops\n", &what), ErrorCode::kParse);
  EXPECT_NE(what.find("line 2"), std::string::npos);
}

TEST(LoadCorpus, RoundTripKeepsNonEmptyDocuments) {
  const Corpus src = MakeFixtureCorpus(FixtureKind::kEnglish, 3000, 5);
  std::ostringstream out;
  WriteCorpus(src, out);
  const Corpus back = Parse(out.str() + "{\"text\":\"\"}\n");
  EXPECT_EQ(back.documents, src.documents);
}

TEST(SampleCalibration, SingleDocumentForcedWindow) {
  Corpus c;
  c.documents = {"0123456789"};
  const CalibrationSet set = SampleCalibration(c, 1, 10, RngStream(1, 0));
  ASSERT_EQ(set.sequences.size(), 1u);
  EXPECT_EQ(set.sequences[0], Encode("0123456789"));
  EXPECT_EQ(set.provenance, Provenance::kSampled);
}

TEST(SampleCalibration, DefaultShape) {
  Corpus c;
  c.source_label = "long";
  RngStream gen(2, 0);
  for (int d = 0; d < 3; ++d) {
    std::string doc(3000 + d * 500, 'a');
    for (char& ch : doc) ch = static_cast<char>('a' + gen.UniformInt(26));
    c.documents.push_back(doc);
  }
  const CalibrationSet set = SampleCalibration(c, 128, 2048, RngStream(7, 0));
  ASSERT_EQ(set.sequences.size(), 128u);
  for (const auto& s : set.sequences) ASSERT_EQ(s.size(), 2048u);
  EXPECT_EQ(set.token_count(), 128u * 2048u);
}

TEST(SampleCalibration, DeterministicAndSkipsShortDocuments) {
  Corpus c;
  c.documents = {"short", std::string(40, 'x') + "yz", "tiny"};
  const auto a = SampleCalibration(c, 20, 30, RngStream(3, 4));
  const auto b = SampleCalibration(c, 20, 30, RngStream(3, 4));
  EXPECT_EQ(a.sequences, b.sequences);
  for (const auto& s : a.sequences) EXPECT_EQ(s.size(), 30u);
  EXPECT_EQ(WindowSource(c, 30).eligible_documents(), 1u);
}

TEST(SampleCalibration, NoLongDocumentRejected) {
  Corpus c;
  c.documents = {"abc", "de"};
  EXPECT_THROW(SampleCalibration(c, 1, 10, RngStream(1, 0)), Error);
  // Concatenation serves the request from the joined stream.
  const auto set = SampleCalibration(c, 2, 6, RngStream(1, 0), SampleOptions{.concat = true});
  for (const auto& s : set.sequences) EXPECT_EQ(s.size(), 6u);
}

TEST(SampleCalibration, ConcatInsertsBosBeforeEachDocument) {
  Corpus c;
  c.documents = {"ab", "cd"};
  const auto set = SampleCalibration(c, 1, 6, RngStream(1, 0), SampleOptions{.concat = true});
  EXPECT_EQ(set.sequences[0], (TokenSequence{256, 'a', 'b', 256, 'c', 'd'}));
}

// Pearson chi-square over start-offset deciles, 9 degrees of freedom;
// 27.877 is the 0.999 quantile.
TEST(SampleCalibration, WindowStartsAreUniform) {
  RngStream gen(8, 0);
  std::string doc(4096, 'a');
  for (char& ch : doc) ch = static_cast<char>(gen.UniformInt(256));
  std::map<TokenSequence, size_t> offset_of;
  for (size_t s = 0; s + 2048 <= doc.size(); ++s) offset_of[Encode(std::string_view(doc).substr(s, 8))] = s;
  ASSERT_EQ(offset_of.size(), 2049u);
  Corpus c;
  c.documents = {doc};
  const WindowSource source(c, 2048);
  RngStream rng(9, 0);
  std::vector<double> bins(10, 0.0);
  for (int i = 0; i < 10000; ++i) {
    const TokenSequence w = source.Draw(rng);
    const size_t start = offset_of.at(TokenSequence(w.begin(), w.begin() + 8));
    bins[std::min<size_t>(9, start * 10 / 2049)] += 1.0;
  }
  double chi2 = 0.0;
  for (size_t k = 0; k < 10; ++k) {
    // Expected count from the exact number of offsets in each decile.
    size_t count = 0;
    for (size_t s = 0; s <= 2048; ++s) count += (std::min<size_t>(9, s * 10 / 2049) == k);
    const double expected = 10000.0 * static_cast<double>(count) / 2049.0;
    chi2 += (bins[k] - expected) * (bins[k] - expected) / expected;
  }
  EXPECT_LT(chi2, 27.877);
}

TEST(MultiSeedSets, CountsAndStreamConvention) {
  const Corpus c = MakeFixtureCorpus(FixtureKind::kEnglish, 20000, 1);
  const auto sets = MultiSeedSets(c, 4, 64, 11);
  EXPECT_EQ(sets.size(), 20u);
  const auto one = MultiSeedSets(c, 4, 64, 11, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].sequences, SampleCalibration(c, 4, 64, RngStream(11, 0)).sequences);
  EXPECT_EQ(sets[3].sequences, SampleCalibration(c, 4, 64, RngStream(11, 3)).sequences);
  EXPECT_THROW(MultiSeedSets(c, 4, 64, 11, 0), Error);
}

TEST(MultiSeedSets, ReplicatesDiffer) {
  const Corpus c = MakeFixtureCorpus(FixtureKind::kEnglish, 50000, 1);
  for (uint64_t base = 0; base < 5; ++base) {
    const auto sets = MultiSeedSets(c, 8, 64, base, 5);
    std::set<std::vector<TokenSequence>> distinct;
    for (const auto& s : sets) distinct.insert(s.sequences);
    EXPECT_EQ(distinct.size(), 5u);
  }
}

TEST(CalibrationFile, RoundTrip) {
  const Corpus c = MakeFixtureCorpus(FixtureKind::kCode, 5000, 2);
  CalibrationSet set = SampleCalibration(c, 5, 32, RngStream(4, 0));
  std::ostringstream out;
  WriteCalibration(set, out);
  const std::string first_line = out.str().substr(0, out.str().find('\n'));
  const auto j = nlohmann::json::parse(first_line);
  EXPECT_EQ(j["provenance"], "sampled");
  EXPECT_EQ(j["seed"], 4u);
  EXPECT_EQ(j["source"], "code");
  EXPECT_EQ(j["ids"].size(), 32u);
  std::istringstream in(out.str());
  const CalibrationSet back = ReadCalibration(in);
  EXPECT_EQ(back.sequences, set.sequences);
  EXPECT_EQ(back.source_label, "code");
}

TEST(EvalSequences, NonOverlappingWindows) {
  Corpus c;
  c.documents = {"abcde", "fg"};
  const auto seqs = EvalSequences(c, 3);
  ASSERT_EQ(seqs.size(), 3u);
  EXPECT_EQ(seqs[0], (TokenSequence{256, 'a', 'b'}));
  EXPECT_EQ(seqs[2], (TokenSequence{256, 'f', 'g'}));
}

TEST(Fixture, DeterministicAndDistinct) {
  const Corpus a1 = MakeFixtureCorpus(FixtureKind::kEnglish, 10000, 1);
  const Corpus a2 = MakeFixtureCorpus(FixtureKind::kEnglish, 10000, 1);
  const Corpus held = MakeFixtureCorpus(FixtureKind::kEnglish, 10000, 2);
  EXPECT_EQ(a1.documents, a2.documents);
  EXPECT_NE(a1.documents, held.documents);
  size_t bytes = 0;
  for (const auto& d : a1.documents) bytes += d.size();
  EXPECT_GE(bytes, 10000u);
  const Corpus b = MakeFixtureCorpus(FixtureKind::kCode, 2000, 3);
  EXPECT_NE(b.documents[0].find('{'), std::string::npos);
}

}  // namespace
}  // namespace calibprune
