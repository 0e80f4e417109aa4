// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// n-gram shingles, exact Jaccard similarity and MinHash signatures.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "calibprune/corpus.hpp"
#include "calibprune/error.hpp"
#include "calibprune/rng.hpp"

namespace calibprune {

enum class ShingleUnit { kWord, kByte };

using ShingleSet = std::set<std::string>;

// Word units are whitespace-separated and ASCII-lowercased; a shingle is n
// consecutive units joined by single spaces.
inline ShingleSet Shingles(std::string_view text, size_t n = 3, ShingleUnit unit = ShingleUnit::kWord) {
  Require(n >= 1, ErrorCode::kInvalidArgument, "shingle size must be >= 1");
  ShingleSet out;
  if (unit == ShingleUnit::kByte) {
    for (size_t i = 0; i + n <= text.size(); ++i) out.emplace(text.substr(i, n));
    return out;
  }
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  for (size_t i = 0; i + n <= words.size(); ++i) {
    std::string s = words[i];
    for (size_t k = 1; k < n; ++k) s += " " + words[i + k];
    out.insert(std::move(s));
  }
  return out;
}

// Union of the shingles of every document.
inline ShingleSet CorpusShingles(const Corpus& corpus, size_t n = 3, ShingleUnit unit = ShingleUnit::kWord) {
  ShingleSet out;
  for (const auto& doc : corpus.documents) out.merge(Shingles(doc, n, unit));
  return out;
}

// |a∩b| / |a∪b|; 1 when both sets are empty.
inline double JaccardExact(const ShingleSet& a, const ShingleSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  size_t inter = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) ++ia;
    else if (*ib < *ia) ++ib;
    else ++inter, ++ia, ++ib;
  }
  const size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MinHashSignature {
  size_t num_perms = 0;
  uint64_t seed = 0;
  std::vector<uint64_t> mins;
};

inline uint64_t Fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Permutation i is the 64-bit hash x -> SplitMix64(fnv(x) ^ salt_i) with
// salt_i derived from (seed, i).
inline MinHashSignature MinHash(const ShingleSet& shingles, size_t num_perms, uint64_t seed) {
  Require(num_perms >= 1, ErrorCode::kInvalidArgument, "num_perms must be >= 1");
  MinHashSignature sig{num_perms, seed, std::vector<uint64_t>(num_perms, std::numeric_limits<uint64_t>::max())};
  std::vector<uint64_t> salts(num_perms);
  for (size_t i = 0; i < num_perms; ++i) salts[i] = SplitMix64(SplitMix64(seed) + 0x632be59bd9b4e019ULL * (i + 1));
  for (const auto& s : shingles) {
    const uint64_t base = Fnv1a64(s);
    for (size_t i = 0; i < num_perms; ++i) sig.mins[i] = std::min(sig.mins[i], SplitMix64(base ^ salts[i]));
  }
  return sig;
}

// Fraction of signature coordinates that agree.
inline double MinHashEstimate(const MinHashSignature& a, const MinHashSignature& b) {
  Require(a.num_perms == b.num_perms && a.seed == b.seed && a.mins.size() == b.mins.size(),
          ErrorCode::kInvalidArgument, "signatures differ in num_perms or seed");
  size_t same = 0;
  for (size_t i = 0; i < a.mins.size(); ++i) same += a.mins[i] == b.mins[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.mins.size());
}

}  // namespace calibprune
