// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic synthetic corpora for the desk fixture model:
//   kEnglish  grammar-generated English prose (training corpus and, with a
//             different seed, the held-out evaluation corpus)
//   kCode     C-like source text with unrelated byte statistics
//   kShuffled the English generator's words in random order

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "calibprune/corpus.hpp"
#include "calibprune/error.hpp"
#include "calibprune/rng.hpp"

namespace calibprune {

enum class FixtureKind { kEnglish, kCode, kShuffled };

inline FixtureKind ParseFixtureKind(std::string_view s) {
  if (s == "english") return FixtureKind::kEnglish;
  if (s == "code") return FixtureKind::kCode;
  if (s == "shuffled") return FixtureKind::kShuffled;
  Fail(ErrorCode::kInvalidArgument, "unknown fixture kind '" + std::string(s) + "'");
}

namespace detail {

template <size_t N>
std::string_view Pick(const std::array<std::string_view, N>& words, RngStream& rng) {
  return words[rng.UniformInt(N)];
}

inline constexpr std::array<std::string_view, 24> kNouns = {
    "farmer", "teacher", "river",  "village", "child",  "captain", "garden", "letter",
    "horse",  "doctor",  "window", "market",  "forest", "soldier", "bridge", "kitchen",
    "sister", "king",    "city",   "boat",    "mother", "student", "storm",  "mountain"};
inline constexpr std::array<std::string_view, 16> kAdjectives = {
    "old",   "quiet", "small",  "bright", "young", "cold",   "heavy",  "green",
    "tired", "large", "gentle", "dark",   "happy", "strange", "narrow", "warm"};
inline constexpr std::array<std::string_view, 20> kVerbs = {
    "watched", "carried", "found",   "followed", "opened",  "crossed", "painted",
    "visited", "left",    "helped",  "called",   "cleaned", "built",   "closed",
    "reached", "saw",     "remembered", "loved", "answered", "missed"};
inline constexpr std::array<std::string_view, 10> kPreps = {"near", "behind", "across", "into", "under",
                                                            "beside", "through", "toward", "over", "past"};
inline constexpr std::array<std::string_view, 10> kAdverbs = {
    "slowly", "again", "quickly", "carefully", "later", "softly", "often", "early", "alone", "today"};
inline constexpr std::array<std::string_view, 8> kConnectives = {
    "Then", "After that", "In the morning", "Later", "At night", "Soon", "Every day", "Once"};

inline std::string NounPhrase(RngStream& rng) {
  std::string s = rng.NextDouble() < 0.5 ? "the " : "a ";
  if (rng.NextDouble() < 0.6) s += std::string(Pick(kAdjectives, rng)) + " ";
  s += Pick(kNouns, rng);
  return s;
}

inline std::string EnglishSentence(RngStream& rng) {
  std::string s;
  if (rng.NextDouble() < 0.3) s += std::string(Pick(kConnectives, rng)) + " ";
  std::string subject = NounPhrase(rng);
  if (s.empty()) subject[0] = static_cast<char>(subject[0] - 'a' + 'A');
  s += subject + " " + std::string(Pick(kVerbs, rng)) + " " + NounPhrase(rng);
  const double r = rng.NextDouble();
  if (r < 0.4) {
    s += " " + std::string(Pick(kPreps, rng)) + " " + NounPhrase(rng);
  } else if (r < 0.6) {
    s += " " + std::string(Pick(kAdverbs, rng));
  } else if (r < 0.8) {
    s += " and " + std::string(Pick(kVerbs, rng)) + " " + NounPhrase(rng);
  }
  s += rng.NextDouble() < 0.9 ? ". " : "! ";
  return s;
}

inline std::string EnglishDocument(RngStream& rng) {
  std::string doc;
  const size_t sentences = 3 + rng.UniformInt(6);
  for (size_t i = 0; i < sentences; ++i) doc += EnglishSentence(rng);
  doc.pop_back();
  return doc;
}

inline constexpr std::array<std::string_view, 12> kIdents = {"buf", "len", "idx", "ptr", "node", "count",
                                                             "tmp", "val", "src", "dst", "key", "cap"};
inline constexpr std::array<std::string_view, 5> kTypes = {"int", "size_t", "char*", "uint32_t", "float"};
inline constexpr std::array<std::string_view, 6> kOps = {"+", "-", "*", "^", "&", "|"};

inline std::string Ident(RngStream& rng) {
  std::string s(Pick(kIdents, rng));
  if (rng.NextDouble() < 0.5) s += "_" + std::to_string(rng.UniformInt(16));
  return s;
}

inline std::string CodeStatement(RngStream& rng, const std::string& indent) {
  const double r = rng.NextDouble();
  if (r < 0.35) {
    return indent + Ident(rng) + " = " + Ident(rng) + " " + std::string(Pick(kOps, rng)) + " 0x" +
           std::to_string(rng.UniformInt(100)) + ";\n";
  }
  if (r < 0.6) {
    const std::string i = Ident(rng);
    return indent + "for (" + i + " = 0; " + i + " < " + Ident(rng) + "; ++" + i + ") {\n" + indent + "  " +
           Ident(rng) + "[" + i + "] = " + Ident(rng) + "[" + i + "];\n" + indent + "}\n";
  }
  if (r < 0.8) {
    return indent + "if (" + Ident(rng) + " != NULL) " + Ident(rng) + "(" + Ident(rng) + ", " +
           std::to_string(rng.UniformInt(64)) + ");\n";
  }
  return indent + std::string(Pick(kTypes, rng)) + " " + Ident(rng) + " = {" + std::to_string(rng.UniformInt(9)) +
         "};\n";
}

inline std::string CodeDocument(RngStream& rng) {
  std::string doc = "static " + std::string(Pick(kTypes, rng)) + " " + Ident(rng) + "_fn(" +
                    std::string(Pick(kTypes, rng)) + " " + Ident(rng) + ") {\n";
  const size_t statements = 3 + rng.UniformInt(6);
  for (size_t i = 0; i < statements; ++i) doc += CodeStatement(rng, "  ");
  doc += "  return " + Ident(rng) + ";\n}";
  return doc;
}

inline std::string ShuffledDocument(RngStream& rng) {
  std::vector<std::string> words;
  const std::string text = EnglishDocument(rng);
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find(' ', start);
    if (end == std::string::npos) end = text.size();
    words.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  for (size_t i = words.size(); i > 1; --i) std::swap(words[i - 1], words[rng.UniformInt(i)]);
  std::string doc;
  for (const auto& w : words) doc += (doc.empty() ? "" : " ") + w;
  return doc;
}

}  // namespace detail

// Documents are appended until the corpus holds at least `target_bytes`.
inline Corpus MakeFixtureCorpus(FixtureKind kind, size_t target_bytes, uint64_t seed) {
  Require(target_bytes > 0, ErrorCode::kInvalidArgument, "target_bytes must be > 0");
  RngStream rng(seed, static_cast<uint64_t>(kind));
  Corpus corpus;
  corpus.source_label = kind == FixtureKind::kEnglish ? "english" : kind == FixtureKind::kCode ? "code" : "shuffled";
  size_t bytes = 0;
  while (bytes < target_bytes) {
    std::string doc = kind == FixtureKind::kEnglish ? detail::EnglishDocument(rng)
                      : kind == FixtureKind::kCode  ? detail::CodeDocument(rng)
                                                    : detail::ShuffledDocument(rng);
    bytes += doc.size();
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

// The desk fixture recipe: seeds and sizes shared by the acceptance suite and
// the `fixture` CLI subcommand.
struct FixtureRecipe {
  uint64_t train_seed = 1;      // corpus A
  uint64_t heldout_seed = 2;    // held-out A
  uint64_t other_seed = 3;      // corpus B
  uint64_t init_seed = 4;
  size_t train_bytes = 100'000;
  size_t heldout_bytes = 20'000;
  size_t other_bytes = 100'000;
};

}  // namespace calibprune
