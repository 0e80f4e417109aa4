// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-seed calibration experiments. Every (source, setting, replicate) cell
// runs calibration → stats → plan → mask → apply → held-out perplexity; cells
// are aggregated per (source, setting).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calibprune/corpus.hpp"
#include "calibprune/diagnostics.hpp"
#include "calibprune/error.hpp"
#include "calibprune/parallel.hpp"
#include "calibprune/prune_pipeline.hpp"
#include "calibprune/self_gen.hpp"
#include "calibprune/weights_io.hpp"
#include "json.hpp"

namespace calibprune {

struct CalibSourceSpec {
  std::string label;
  std::string path;
  Provenance mode = Provenance::kSampled;
};

struct ExperimentConfig {
  std::string model_path;
  std::vector<CalibSourceSpec> calib_sources;
  PruneMethod method = PruneMethod::kWanda;
  OwlOptions owl;
  std::vector<SparsitySetting> sparsity;
  size_t n = 128;
  size_t seq_len = 2048;  // L
  size_t replicates = 20;
  std::string eval_corpus;
  size_t eval_seq_len = 0;  // 0 means L
  std::string output_dir;
  uint64_t seed = 0;
  bool concat = false;
  // Self-generated sources: n_gen samples of N = generation.max_len tokens.
  // n_gen == 0 means ceil(n / (1 − filter_rate)).
  GenerationConfig generation;
  size_t n_gen = 0;
  double filter_rate = 0.2;
  size_t jobs = 1;

  size_t effective_eval_len() const { return eval_seq_len == 0 ? seq_len : eval_seq_len; }

  size_t effective_n_gen() const {
    if (n_gen != 0) return n_gen;
    return static_cast<size_t>(std::ceil(static_cast<double>(n) / (1.0 - filter_rate) - 1e-9));
  }

  // Checks values only; paths are checked by RunExperiment.
  void Validate() const {
    Require(replicates >= 1, ErrorCode::kInvalidArgument, "replicates must be >= 1");
    Require(n >= 1, ErrorCode::kInvalidArgument, "n must be >= 1");
    Require(seq_len >= 2, ErrorCode::kInvalidArgument, "L must be >= 2");
    Require(!calib_sources.empty(), ErrorCode::kInvalidArgument, "no calibration sources");
    Require(!sparsity.empty(), ErrorCode::kInvalidArgument, "no sparsity settings");
    Require(filter_rate >= 0.0 && filter_rate < 1.0, ErrorCode::kInvalidArgument,
            "filter_rate must be in [0, 1)");
    std::vector<std::string> labels;
    for (const auto& s : calib_sources) {
      Require(!s.label.empty(), ErrorCode::kInvalidArgument, "calibration source without label");
      Require(std::find(labels.begin(), labels.end(), s.label) == labels.end(), ErrorCode::kInvalidArgument,
              "duplicate calibration source label '" + s.label + "'");
      labels.push_back(s.label);
    }
    bool any_generated = false;
    for (const auto& s : calib_sources) any_generated |= s.mode == Provenance::kSelfGenerated;
    if (any_generated) generation.Validate();
  }

  // Applies the desk-scale preset: n=32, L=128, replicates=5, n_gen=512, N=256.
  void ApplyDeskPreset() {
    n = 32;
    seq_len = 128;
    replicates = 5;
    n_gen = 512;
    generation.max_len = 256;
  }
};

inline ExperimentConfig ExperimentConfigFromJson(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.model_path = j.at("model_path").get<std::string>();
    c.eval_corpus = j.at("eval_corpus").get<std::string>();
    c.output_dir = j.value("output_dir", std::string());
    for (const auto& s : j.at("calib_sources")) {
      CalibSourceSpec spec;
      spec.label = s.at("label").get<std::string>();
      spec.path = s.at("path").get<std::string>();
      spec.mode = ParseProvenance(s.value("mode", std::string("sampled")));
      c.calib_sources.push_back(std::move(spec));
    }
    const auto& p = j.at("pruning");
    c.method = ParsePruneMethod(p.value("method", std::string("wanda")));
    if (p.contains("owl")) {
      const auto& o = p["owl"];
      if (o.is_boolean()) {
        c.owl.enabled = o.get<bool>();
      } else {
        c.owl.enabled = o.value("enabled", true);
        c.owl.lambda = o.value("lambda", c.owl.lambda);
        c.owl.m_mult = o.value("m", c.owl.m_mult);
      }
    }
    const auto& sp = p.at("sparsity");
    if (sp.is_array()) {
      for (const auto& s : sp) c.sparsity.push_back(ParseSparsity(s.is_string() ? s.get<std::string>() : s.dump()));
    } else {
      c.sparsity.push_back(ParseSparsity(sp.is_string() ? sp.get<std::string>() : sp.dump()));
    }
    c.n = j.value("n", c.n);
    c.seq_len = j.value("L", c.seq_len);
    c.replicates = j.value("replicates", c.replicates);
    c.eval_seq_len = j.value("eval_L", c.eval_seq_len);
    c.seed = j.value("seed", c.seed);
    c.concat = j.value("concat", c.concat);
    c.jobs = j.value("jobs", c.jobs);
    if (j.contains("generation")) {
      const auto& g = j["generation"];
      c.generation.prefix_len = g.value("prefix_len", c.generation.prefix_len);
      c.generation.max_len = g.value("N", c.generation.max_len);
      c.generation.top_k = g.value("top_k", c.generation.top_k);
      c.generation.top_p = g.value("top_p", c.generation.top_p);
      c.generation.temperature = g.value("temperature", c.generation.temperature);
      c.generation.repetition_penalty = g.value("repetition_penalty", c.generation.repetition_penalty);
      c.n_gen = g.value("n_gen", c.n_gen);
      c.filter_rate = g.value("filter_rate", c.filter_rate);
    }
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorCode::kParse, std::string("experiment config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig LoadExperimentConfig(const std::string& path) {
  std::ifstream in(path);
  Require(static_cast<bool>(in), ErrorCode::kIo, "cannot open config " + path);
  try {
    return ExperimentConfigFromJson(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    Fail(ErrorCode::kParse, "config " + path + ": " + e.what());
  }
}

// Echo of the effective configuration, as stored in report.json.
inline nlohmann::ordered_json ExperimentConfigToJson(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["model_path"] = c.model_path;
  j["eval_corpus"] = c.eval_corpus;
  j["calib_sources"] = nlohmann::ordered_json::array();
  for (const auto& s : c.calib_sources) {
    j["calib_sources"].push_back({{"label", s.label}, {"path", s.path}, {"mode", ProvenanceName(s.mode)}});
  }
  nlohmann::ordered_json p;
  p["method"] = PruneMethodName(c.method);
  p["owl"] = {{"enabled", c.owl.enabled}, {"lambda", c.owl.lambda}, {"m", c.owl.m_mult}};
  p["sparsity"] = nlohmann::ordered_json::array();
  for (const auto& s : c.sparsity) p["sparsity"].push_back(s.label());
  j["pruning"] = p;
  j["n"] = c.n;
  j["L"] = c.seq_len;
  j["eval_L"] = c.effective_eval_len();
  j["replicates"] = c.replicates;
  j["seed"] = c.seed;
  j["concat"] = c.concat;
  j["generation"] = {{"prefix_len", c.generation.prefix_len},
                     {"N", c.generation.max_len},
                     {"top_k", c.generation.top_k},
                     {"top_p", c.generation.top_p},
                     {"temperature", c.generation.temperature},
                     {"repetition_penalty", c.generation.repetition_penalty},
                     {"n_gen", c.effective_n_gen()},
                     {"filter_rate", c.filter_rate}};
  return j;
}

struct ExperimentCell {
  std::string source;
  std::string setting;
  size_t replicate = 0;
  std::optional<double> perplexity;
  std::string error;
};

struct CellAggregate {
  std::string source;
  std::string setting;
  size_t count = 0;  // successful replicates
  size_t failed = 0;
  double mean = 0.0;
  double std = 0.0;  // denominator count − 1; 0 when count < 2
  double min = 0.0;
  double max = 0.0;
};

struct ExperimentReport {
  ExperimentConfig config;
  double dense_perplexity = 0.0;
  std::vector<ExperimentCell> cells;  // source-major, then setting, then replicate
  std::vector<CellAggregate> aggregates;

  size_t failed_cells() const {
    size_t f = 0;
    for (const auto& c : cells) f += c.perplexity ? 0 : 1;
    return f;
  }

  const CellAggregate& aggregate(const std::string& source, const std::string& setting) const {
    for (const auto& a : aggregates) {
      if (a.source == source && a.setting == setting) return a;
    }
    Fail(ErrorCode::kInvalidArgument, "no aggregate for " + source + " / " + setting);
  }

  // Perplexities of one (source, setting) in replicate order; NaN for failures.
  std::vector<double> replicate_values(const std::string& source, const std::string& setting) const {
    std::vector<double> v;
    for (const auto& c : cells) {
      if (c.source == source && c.setting == setting) {
        v.push_back(c.perplexity.value_or(std::numeric_limits<double>::quiet_NaN()));
      }
    }
    return v;
  }
};

inline CellAggregate Aggregate(const std::string& source, const std::string& setting,
                               const std::vector<ExperimentCell>& cells) {
  CellAggregate a;
  a.source = source;
  a.setting = setting;
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.source != source || c.setting != setting) continue;
    if (c.perplexity) v.push_back(*c.perplexity);
    else ++a.failed;
  }
  a.count = v.size();
  if (v.empty()) return a;
  a.mean = SumExact(v) / static_cast<double>(v.size());
  std::vector<double> sq;
  for (double x : v) sq.push_back((x - a.mean) * (x - a.mean));
  a.std = v.size() < 2 ? 0.0 : std::sqrt(SumExact(sq) / static_cast<double>(v.size() - 1));
  a.min = *std::min_element(v.begin(), v.end());
  a.max = *std::max_element(v.begin(), v.end());
  return a;
}

// Calibration set for one (source, replicate). Sampled sources draw n windows
// of L tokens. Self-generated sources generate n_gen samples from prefixes of
// the source corpus, filter, and keep the first n survivors when N == L;
// otherwise n windows of L tokens are drawn from the survivors.
inline CalibrationSet BuildCalibration(const WeightContainer& w, const Corpus& corpus, const CalibSourceSpec& spec,
                                       const ExperimentConfig& cfg, const RngStream& rng, size_t gen_jobs = 1) {
  if (spec.mode == Provenance::kSampled) {
    SampleOptions opts;
    opts.concat = cfg.concat;
    CalibrationSet set = SampleCalibration(corpus, cfg.n, cfg.seq_len, rng.Derive(0), opts);
    set.source_label = spec.label;
    return set;
  }
  const auto generated = GenerateSet(w, corpus, cfg.effective_n_gen(), cfg.generation, rng.Derive(1), gen_jobs);
  const auto survivors = PerplexityFilter(generated, cfg.filter_rate);
  CalibrationSet set;
  set.provenance = Provenance::kSelfGenerated;
  set.seed = rng.seed();
  set.source_label = spec.label;
  if (cfg.generation.max_len == cfg.seq_len) {
    Require(survivors.size() >= cfg.n, ErrorCode::kInvalidArgument,
            "only " + std::to_string(survivors.size()) + " generated samples survive filtering, need " +
                std::to_string(cfg.n));
    for (size_t i = 0; i < cfg.n; ++i) {
      set.sequences.push_back(survivors[i].ids);
      set.perplexities.push_back(survivors[i].perplexity);
    }
    return set;
  }
  Require(cfg.generation.max_len >= cfg.seq_len, ErrorCode::kInvalidArgument,
          "generation length N must be >= L");
  RngStream pick = rng.Derive(2);
  const size_t span = cfg.generation.max_len - cfg.seq_len + 1;
  for (size_t i = 0; i < cfg.n; ++i) {
    const auto& s = survivors[pick.UniformInt(survivors.size())];
    const size_t start = pick.UniformInt(span);
    set.sequences.emplace_back(s.ids.begin() + static_cast<std::ptrdiff_t>(start),
                               s.ids.begin() + static_cast<std::ptrdiff_t>(start + cfg.seq_len));
    set.perplexities.push_back(s.perplexity);
  }
  return set;
}

// Calibration for (source i, replicate r) uses RngStream(seed, i).Derive(r);
// cells run on up to cfg.jobs threads and record their own failures.
inline ExperimentReport RunExperiment(const ExperimentConfig& cfg) {
  cfg.Validate();
  namespace fs = std::filesystem;
  Require(fs::exists(cfg.model_path), ErrorCode::kIo, "model not found: " + cfg.model_path);
  Require(fs::exists(cfg.eval_corpus), ErrorCode::kIo, "eval corpus not found: " + cfg.eval_corpus);
  for (const auto& s : cfg.calib_sources) {
    Require(fs::exists(s.path), ErrorCode::kIo, "calibration source not found: " + s.path);
  }
  const WeightContainer w = LoadWeights(cfg.model_path);
  Require(cfg.seq_len <= w.config().max_seq_len && cfg.effective_eval_len() <= w.config().max_seq_len,
          ErrorCode::kInvalidArgument, "L exceeds model max_seq_len");
  const auto eval = EvalSequences(LoadCorpus(cfg.eval_corpus, "eval"), cfg.effective_eval_len());
  std::vector<Corpus> corpora;
  for (const auto& s : cfg.calib_sources) corpora.push_back(LoadCorpus(s.path, s.label));

  ExperimentReport report;
  report.config = cfg;
  report.dense_perplexity = Perplexity(w, eval);

  const size_t ns = cfg.calib_sources.size(), nr = cfg.replicates, nset = cfg.sparsity.size();
  std::vector<std::optional<CalibrationSet>> calib(ns * nr);
  std::vector<std::string> calib_error(ns * nr);
  ParallelFor(ns * nr, cfg.jobs, [&](size_t k) {
    const size_t i = k / nr, r = k % nr;
    try {
      calib[k] = BuildCalibration(w, corpora[i], cfg.calib_sources[i], cfg, RngStream(cfg.seed, i).Derive(r));
    } catch (const std::exception& e) {
      calib_error[k] = e.what();
    }
  });

  report.cells.resize(ns * nset * nr);
  ParallelFor(report.cells.size(), cfg.jobs, [&](size_t idx) {
    const size_t i = idx / (nset * nr), s = (idx / nr) % nset, r = idx % nr;
    ExperimentCell& cell = report.cells[idx];
    cell.source = cfg.calib_sources[i].label;
    cell.setting = cfg.sparsity[s].label();
    cell.replicate = r;
    const size_t k = i * nr + r;
    if (!calib[k]) {
      cell.error = calib_error[k];
      return;
    }
    try {
      PruneOptions opts;
      opts.method = cfg.method;
      opts.sparsity = cfg.sparsity[s];
      opts.owl = cfg.owl;
      const PruneResult pruned = PruneModel(w, *calib[k], opts);
      cell.perplexity = Perplexity(pruned.weights, eval);
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });

  for (const auto& src : cfg.calib_sources) {
    for (const auto& setting : cfg.sparsity) {
      report.aggregates.push_back(Aggregate(src.label, setting.label(), report.cells));
    }
  }
  return report;
}

inline nlohmann::ordered_json ReportToJson(const ExperimentReport& r) {
  nlohmann::ordered_json j;
  j["config"] = ExperimentConfigToJson(r.config);
  j["dense_perplexity"] = r.dense_perplexity;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : r.cells) {
    nlohmann::ordered_json cj;
    cj["source"] = c.source;
    cj["setting"] = c.setting;
    cj["replicate"] = c.replicate;
    if (c.perplexity) cj["perplexity"] = *c.perplexity;
    else cj["perplexity"] = nullptr;
    if (!c.error.empty()) cj["error"] = c.error;
    j["cells"].push_back(cj);
  }
  j["aggregates"] = nlohmann::ordered_json::array();
  for (const auto& a : r.aggregates) {
    j["aggregates"].push_back({{"source", a.source},
                               {"setting", a.setting},
                               {"count", a.count},
                               {"failed", a.failed},
                               {"mean", a.mean},
                               {"std", a.std},
                               {"min", a.min},
                               {"max", a.max}});
  }
  return j;
}

// Per setting, max − min of the source means. Needs at least two sources.
inline std::map<std::string, double> ReportRange(const ExperimentReport& r) {
  std::vector<std::string> sources, settings;
  for (const auto& a : r.aggregates) {
    if (std::find(sources.begin(), sources.end(), a.source) == sources.end()) sources.push_back(a.source);
    if (std::find(settings.begin(), settings.end(), a.setting) == settings.end()) settings.push_back(a.setting);
  }
  Require(sources.size() >= 2, ErrorCode::kInvalidArgument, "range needs at least two calibration sources");
  std::map<std::string, double> range;
  for (const auto& setting : settings) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& a : r.aggregates) {
      if (a.setting != setting || a.count == 0) continue;
      lo = std::min(lo, a.mean);
      hi = std::max(hi, a.mean);
    }
    if (lo <= hi) range[setting] = hi - lo;
  }
  return range;
}

// Rows are sources, columns are settings, entries "mean ± std" with the
// failed-replicate count appended when nonzero.
inline std::string ReportToText(const ExperimentReport& r) {
  std::vector<std::string> header = {"source"};
  for (const auto& s : r.config.sparsity) header.push_back(s.label());
  std::vector<std::vector<std::string>> rows = {header};
  for (const auto& src : r.config.calib_sources) {
    std::vector<std::string> row = {src.label};
    for (const auto& s : r.config.sparsity) {
      const CellAggregate& a = r.aggregate(src.label, s.label());
      char buf[96];
      if (a.count == 0) {
        std::snprintf(buf, sizeof(buf), "failed");
      } else if (a.failed > 0) {
        std::snprintf(buf, sizeof(buf), "%.3f ± %.3f (%zu failed)", a.mean, a.std, a.failed);
      } else {
        std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", a.mean, a.std);
      }
      row.push_back(buf);
    }
    rows.push_back(std::move(row));
  }
  // Width counts code points so the ± sign does not skew alignment.
  auto width = [](const std::string& s) {
    size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80 ? 1 : 0;
    return n;
  };
  std::vector<size_t> widths(header.size(), 0);
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  }
  std::ostringstream out;
  char dense[64];
  std::snprintf(dense, sizeof(dense), "%.3f", r.dense_perplexity);
  out << "method " << PruneMethodName(r.config.method) << (r.config.owl.enabled ? " + owl" : "") << ", n "
      << r.config.n << ", L " << r.config.seq_len << ", replicates " << r.config.replicates
      << ", dense perplexity " << dense << "\n";
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size(); ++c) {
      out << row[c] << std::string(widths[c] - width(row[c]), ' ');
      out << (c + 1 < row.size() ? "  " : "\n");
    }
  }
  if (r.config.calib_sources.size() >= 2) {
    out << "range (max-min of means):";
    for (const auto& [setting, v] : ReportRange(r)) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), " %s=%.3f", setting.c_str(), v);
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

// Writes report.json and report.txt into cfg.output_dir.
inline void WriteReport(const ExperimentReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto base = std::filesystem::path(dir);
  std::ofstream json(base / "report.json", std::ios::trunc);
  Require(static_cast<bool>(json), ErrorCode::kIo, "cannot write " + (base / "report.json").string());
  json << ReportToJson(r).dump(2) << "\n";
  std::ofstream txt(base / "report.txt", std::ios::trunc);
  Require(static_cast<bool>(txt), ErrorCode::kIo, "cannot write " + (base / "report.txt").string());
  txt << ReportToText(r);
}

}  // namespace calibprune
