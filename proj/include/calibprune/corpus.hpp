// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibprune/error.hpp"
#include "calibprune/rng.hpp"
#include "calibprune/tokenizer.hpp"

namespace calibprune {

struct Corpus {
  std::vector<std::string> documents;
  std::string source_label;
};

enum class Provenance { kSampled, kSelfGenerated };

inline std::string_view ProvenanceName(Provenance p) {
  return p == Provenance::kSampled ? "sampled" : "self_generated";
}

inline Provenance ParseProvenance(std::string_view s) {
  if (s == "sampled") return Provenance::kSampled;
  if (s == "self_generated") return Provenance::kSelfGenerated;
  Fail(ErrorCode::kParse, "unknown provenance '" + std::string(s) + "'");
}

struct CalibrationSet {
  std::vector<TokenSequence> sequences;
  Provenance provenance = Provenance::kSampled;
  uint64_t seed = 0;
  std::string source_label;
  // Filled for self-generated sets (dense-model perplexity per sequence).
  std::vector<float> perplexities;

  size_t token_count() const {
    size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }

  friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;
};

// JSONL with a string "text" per line; empty texts are dropped, blank lines
// are skipped.
inline Corpus ParseCorpus(std::istream& in, std::string source_label) {
  Corpus corpus;
  corpus.source_label = std::move(source_label);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kParse, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      Fail(ErrorCode::kMissingField, "line " + std::to_string(line_no) + ": missing string field \"text\"");
    }
    std::string text = j["text"].get<std::string>();
    if (!text.empty()) corpus.documents.push_back(std::move(text));
  }
  return corpus;
}

inline Corpus LoadCorpus(const std::string& path, std::string source_label) {
  std::ifstream in(path);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open corpus " + path);
  return ParseCorpus(in, std::move(source_label));
}

inline void WriteCorpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& doc : corpus.documents) out << nlohmann::json{{"text", doc}}.dump() << '\n';
}

struct SampleOptions {
  // Join all documents (each preceded by BOS) into one stream instead of
  // skipping documents shorter than the window.
  bool concat = false;
};

// Tokenized view of a corpus used for window sampling.
class WindowSource {
 public:
  WindowSource(const Corpus& corpus, size_t window, SampleOptions opts = {}) : window_(window) {
    Require(window >= 1, ErrorCode::kInvalidArgument, "window length must be >= 1");
    if (opts.concat) {
      TokenSequence joined;
      for (const auto& doc : corpus.documents) {
        joined.push_back(kBosId);
        const auto ids = Encode(doc);
        joined.insert(joined.end(), ids.begin(), ids.end());
      }
      if (joined.size() >= window) docs_.push_back(std::move(joined));
    } else {
      for (const auto& doc : corpus.documents) {
        if (doc.size() >= window) docs_.push_back(Encode(doc));
      }
    }
    Require(!docs_.empty(), ErrorCode::kInvalidArgument,
            "corpus '" + corpus.source_label + "' has no document with >= " +
                std::to_string(window) + " tokens");
  }

  // Uniform document among eligible ones, then a uniform start offset.
  TokenSequence Draw(RngStream& rng) const {
    const auto& doc = docs_[rng.UniformInt(docs_.size())];
    const size_t start = rng.UniformInt(doc.size() - window_ + 1);
    return TokenSequence(doc.begin() + static_cast<std::ptrdiff_t>(start),
                         doc.begin() + static_cast<std::ptrdiff_t>(start + window_));
  }

  size_t eligible_documents() const { return docs_.size(); }

 private:
  size_t window_;
  std::vector<TokenSequence> docs_;
};

inline CalibrationSet SampleCalibration(const Corpus& corpus, size_t n, size_t seq_len, RngStream rng,
                                        SampleOptions opts = {}) {
  const WindowSource source(corpus, seq_len, opts);
  CalibrationSet set;
  set.provenance = Provenance::kSampled;
  set.seed = rng.seed();
  set.source_label = corpus.source_label;
  set.sequences.reserve(n);
  for (size_t i = 0; i < n; ++i) set.sequences.push_back(source.Draw(rng));
  return set;
}

// Replicate i draws from RngStream(base_seed, i).
inline std::vector<CalibrationSet> MultiSeedSets(const Corpus& corpus, size_t n, size_t seq_len,
                                                 uint64_t base_seed, size_t replicates = 20,
                                                 SampleOptions opts = {}) {
  Require(replicates >= 1, ErrorCode::kInvalidArgument, "replicates must be >= 1");
  std::vector<CalibrationSet> sets;
  sets.reserve(replicates);
  for (size_t i = 0; i < replicates; ++i) {
    sets.push_back(SampleCalibration(corpus, n, seq_len, RngStream(base_seed, i), opts));
  }
  return sets;
}

// Consecutive non-overlapping L-token windows of the BOS-joined corpus, for
// perplexity evaluation; the trailing partial window is dropped.
inline std::vector<TokenSequence> EvalSequences(const Corpus& corpus, size_t seq_len) {
  Require(seq_len >= 2, ErrorCode::kInvalidArgument, "evaluation windows need >= 2 tokens");
  TokenSequence joined;
  for (const auto& doc : corpus.documents) {
    joined.push_back(kBosId);
    const auto ids = Encode(doc);
    joined.insert(joined.end(), ids.begin(), ids.end());
  }
  std::vector<TokenSequence> out;
  for (size_t start = 0; start + seq_len <= joined.size(); start += seq_len) {
    out.emplace_back(joined.begin() + static_cast<std::ptrdiff_t>(start),
                     joined.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  }
  Require(!out.empty(), ErrorCode::kInvalidArgument,
          "corpus '" + corpus.source_label + "' is shorter than one evaluation window");
  return out;
}

// One JSON object per sequence:
// {"ids":[...],"provenance":"sampled"|"self_generated","seed":u64,"source":s[,"perplexity":f]}
inline void WriteCalibration(const CalibrationSet& set, std::ostream& out) {
  for (size_t i = 0; i < set.sequences.size(); ++i) {
    nlohmann::ordered_json j;
    j["ids"] = set.sequences[i];
    j["provenance"] = ProvenanceName(set.provenance);
    j["seed"] = set.seed;
    j["source"] = set.source_label;
    if (i < set.perplexities.size()) j["perplexity"] = set.perplexities[i];
    out << j.dump() << '\n';
  }
}

inline CalibrationSet ReadCalibration(std::istream& in) {
  CalibrationSet set;
  std::string line;
  size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      set.sequences.push_back(j.at("ids").get<TokenSequence>());
      const Provenance prov = ParseProvenance(j.at("provenance").get<std::string>());
      if (first) {
        set.provenance = prov;
        set.seed = j.at("seed").get<uint64_t>();
        set.source_label = j.at("source").get<std::string>();
        first = false;
      }
      if (j.contains("perplexity")) set.perplexities.push_back(j["perplexity"].get<float>());
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kParse, "calibration line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!set.perplexities.empty()) {
    Require(set.perplexities.size() == set.sequences.size(), ErrorCode::kParse,
            "perplexity present on some lines but not all");
  }
  return set;
}

inline CalibrationSet LoadCalibration(const std::string& path) {
  std::ifstream in(path);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open calibration file " + path);
  return ReadCalibration(in);
}

inline void SaveCalibration(const CalibrationSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  Require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path + " for writing");
  WriteCalibration(set, out);
}

}  // namespace calibprune
