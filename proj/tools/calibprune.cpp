// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

// calibprune command-line interface. Exit codes: 0 success, 1 configuration
// or input error, 2 experiment finished with failed cells.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calibprune/calibprune.hpp"
#include "json.hpp"

namespace cp = calibprune;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;

std::ofstream OpenOut(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  cp::Require(static_cast<bool>(out), cp::ErrorCode::kIo, "cannot open " + path + " for writing");
  return out;
}

// Writes to `path`, or stdout when path is empty or "-".
template <typename Fn>
void Emit(const std::string& path, Fn&& fn) {
  if (path.empty() || path == "-") {
    fn(std::cout);
  } else {
    auto out = OpenOut(path);
    fn(out);
  }
}

void AddGenerationFlags(CLI::App* cmd, cp::GenerationConfig& g) {
  cmd->add_option("--prefix-len", g.prefix_len, "Prefix tokens taken from the corpus")->capture_default_str();
  cmd->add_option("--max-len", g.max_len, "Total tokens per generated sample (N)")->capture_default_str();
  cmd->add_option("--top-k", g.top_k, "Top-k truncation (0 disables)")->capture_default_str();
  cmd->add_option("--top-p", g.top_p, "Nucleus mass")->capture_default_str();
  cmd->add_option("--temp", g.temperature, "Sampling temperature")->capture_default_str();
  cmd->add_option("--rep-penalty", g.repetition_penalty, "Repetition penalty")->capture_default_str();
  cmd->add_flag("--continuation-ppl", g.continuation_only_ppl, "Score only the generated continuation");
}

struct Options {
  // fixture
  std::string fixture_kind = "english";
  size_t fixture_bytes = 100'000;
  uint64_t fixture_seed = 1;
  // shared
  std::string model, corpus, calib, out;
  uint64_t seed = 0;
  size_t jobs = 1;
  // train
  cp::ModelConfig model_cfg;
  cp::TrainConfig train;
  uint64_t init_seed = 4;
  // sample
  size_t n = 128;
  size_t seq_len = 2048;
  bool concat = false;
  // generate / filter
  cp::GenerationConfig gen;
  size_t count = 0;
  double filter_rate = 0.2;
  // prune
  std::string method = "wanda";
  std::string sparsity = "0.5";
  bool owl = false;
  double owl_lambda = 0.08, owl_m = 5.0;
  std::string group = "row";
  size_t max_cycles = 50;
  std::string masks_out;
  // minkpp
  double k = 0.5;
  // similarity
  std::string a, b;
  size_t ngram = 3;
  size_t num_perms = 128;
  bool bytes = false;
  // experiment
  std::string config;
  std::string preset;
  std::optional<size_t> x_n, x_seq_len, x_replicates;
  std::string output_dir;
};

int RunFixture(const Options& o) {
  const cp::Corpus c = cp::MakeFixtureCorpus(cp::ParseFixtureKind(o.fixture_kind), o.fixture_bytes, o.fixture_seed);
  Emit(o.out, [&](std::ostream& out) { cp::WriteCorpus(c, out); });
  return 0;
}

int RunTrain(const Options& o) {
  const cp::Corpus corpus = cp::LoadCorpus(o.corpus, "train");
  o.model_cfg.Validate();
  const auto result = cp::Train(cp::InitWeights(o.model_cfg, o.init_seed), corpus, o.train,
                                [](size_t step, float loss) { std::fprintf(stderr, "step %zu loss %.4f\n", step, loss); });
  cp::SaveWeights(result.weights, o.out);
  std::printf("%.6f\n", static_cast<double>(result.losses.back()));
  return 0;
}

int RunSample(const Options& o) {
  const cp::Corpus corpus = cp::LoadCorpus(o.corpus, o.corpus);
  cp::SampleOptions opts;
  opts.concat = o.concat;
  const auto set = cp::SampleCalibration(corpus, o.n, o.seq_len, cp::RngStream(o.seed, 0), opts);
  Emit(o.out, [&](std::ostream& out) { cp::WriteCalibration(set, out); });
  return 0;
}

int RunGenerate(const Options& o) {
  const cp::WeightContainer w = cp::LoadWeights(o.model);
  const cp::Corpus corpus = cp::LoadCorpus(o.corpus, o.corpus);
  const auto samples = cp::GenerateSet(w, corpus, o.count, o.gen, cp::RngStream(o.seed, 0), o.jobs);
  const auto set = cp::ToCalibrationSet(samples, o.seed, corpus.source_label);
  Emit(o.out, [&](std::ostream& out) { cp::WriteCalibration(set, out); });
  return 0;
}

int RunFilter(const Options& o) {
  const cp::CalibrationSet in = cp::LoadCalibration(o.calib);
  const auto kept = cp::PerplexityFilter(cp::FromCalibrationSet(in, o.gen.prefix_len), o.filter_rate);
  cp::CalibrationSet out_set = cp::ToCalibrationSet(kept, in.seed, in.source_label);
  Emit(o.out, [&](std::ostream& out) { cp::WriteCalibration(out_set, out); });
  return 0;
}

int RunPrune(const Options& o) {
  const cp::WeightContainer w = cp::LoadWeights(o.model);
  cp::PruneOptions opts;
  opts.method = cp::ParsePruneMethod(o.method);
  opts.sparsity = cp::ParseSparsity(o.sparsity);
  opts.owl = {o.owl, o.owl_lambda, o.owl_m};
  cp::Require(o.group == "row" || o.group == "layer", cp::ErrorCode::kInvalidArgument,
              "--group must be row or layer");
  opts.group = o.group == "row" ? cp::ComparisonGroup::kPerRow : cp::ComparisonGroup::kPerLayer;
  opts.max_cycles = o.max_cycles;
  cp::CalibrationSet calib;
  if (opts.method != cp::PruneMethod::kMagnitude || opts.owl.enabled) {
    cp::Require(!o.calib.empty(), cp::ErrorCode::kInvalidArgument, "--calib is required for " + o.method);
    calib = cp::LoadCalibration(o.calib);
  }
  const cp::PruneResult r = cp::PruneModel(w, calib, opts);
  cp::SaveWeights(r.weights, o.out);
  if (!o.masks_out.empty()) {
    auto out = OpenOut(o.masks_out);
    cp::WriteMasks(r.masks, r.plan.pattern_name(), out);
  }
  nlohmann::ordered_json j;
  j["pattern"] = r.plan.pattern_name();
  j["target"] = r.plan.global_target;
  j["implied_sparsity"] = r.plan.implied_sparsity(w.config());
  if (!r.plan.per_layer_ratio.empty() && opts.owl.enabled) j["per_layer"] = r.plan.per_layer_ratio;
  std::cout << j.dump() << "\n";
  return 0;
}

int RunEval(const Options& o) {
  const cp::WeightContainer w = cp::LoadWeights(o.model);
  const auto data = cp::EvalSequences(cp::LoadCorpus(o.corpus, o.corpus), o.seq_len);
  nlohmann::ordered_json j;
  j["perplexity"] = cp::Perplexity(w, data);
  j["windows"] = data.size();
  j["seqlen"] = o.seq_len;
  std::cout << j.dump() << "\n";
  return 0;
}

int RunMinKpp(const Options& o) {
  const cp::WeightContainer w = cp::LoadWeights(o.model);
  std::vector<cp::TokenSequence> data;
  if (!o.calib.empty()) {
    data = cp::LoadCalibration(o.calib).sequences;
  } else {
    data = cp::EvalSequences(cp::LoadCorpus(o.corpus, o.corpus), o.seq_len);
  }
  const auto scores = cp::MinKppBatch(w, data, o.k);
  Emit(o.out, [&](std::ostream& out) {
    for (const auto& s : scores) {
      nlohmann::ordered_json j;
      j["score"] = s.sequence_score;
      j["k"] = s.k_fraction;
      out << j.dump() << "\n";
    }
  });
  return 0;
}

int RunSimilarity(const Options& o) {
  const auto unit = o.bytes ? cp::ShingleUnit::kByte : cp::ShingleUnit::kWord;
  const auto sa = cp::CorpusShingles(cp::LoadCorpus(o.a, o.a), o.ngram, unit);
  const auto sb = cp::CorpusShingles(cp::LoadCorpus(o.b, o.b), o.ngram, unit);
  nlohmann::ordered_json j;
  j["a"] = o.a;
  j["b"] = o.b;
  j["ngram"] = o.ngram;
  j["exact"] = cp::JaccardExact(sa, sb);
  j["estimate"] = cp::MinHashEstimate(cp::MinHash(sa, o.num_perms, o.seed), cp::MinHash(sb, o.num_perms, o.seed));
  j["num_perms"] = o.num_perms;
  j["seed"] = o.seed;
  std::cout << j.dump() << "\n";
  return 0;
}

int RunExperimentCmd(const Options& o) {
  cp::ExperimentConfig cfg = cp::LoadExperimentConfig(o.config);
  if (o.preset == "desk") cfg.ApplyDeskPreset();
  if (o.x_n) cfg.n = *o.x_n;
  if (o.x_seq_len) cfg.seq_len = *o.x_seq_len;
  if (o.x_replicates) cfg.replicates = *o.x_replicates;
  if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
  cfg.jobs = o.jobs;
  cp::Require(!cfg.output_dir.empty(), cp::ErrorCode::kInvalidArgument, "no output_dir in config or flags");
  const cp::ExperimentReport report = cp::RunExperiment(cfg);
  cp::WriteReport(report, cfg.output_dir);
  std::cout << cp::ReportToText(report);
  if (const size_t failed = report.failed_cells(); failed > 0) {
    std::fprintf(stderr, "%zu of %zu cells failed; see report.json\n", failed, report.cells.size());
    for (const auto& c : report.cells) {
      if (!c.perplexity) std::fprintf(stderr, "  %s %s #%zu: %s\n", c.source.c_str(), c.setting.c_str(), c.replicate,
                                      c.error.c_str());
    }
    return kExitPartial;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibration data studies for post-training pruning of small byte-level language models"};
  app.require_subcommand(1);
  Options o;

  auto* fixture = app.add_subcommand("fixture", "Write a deterministic synthetic corpus (JSONL)");
  fixture->add_option("--kind", o.fixture_kind, "english | code | shuffled")->capture_default_str();
  fixture->add_option("--bytes", o.fixture_bytes, "Minimum corpus size")->capture_default_str();
  fixture->add_option("--seed", o.fixture_seed)->capture_default_str();
  fixture->add_option("--out", o.out, "Output path (default stdout)");

  auto* train = app.add_subcommand("train", "Train a model on a JSONL corpus");
  train->add_option("--corpus", o.corpus)->required();
  train->add_option("--out", o.out, "Weights output path")->required();
  train->add_option("--steps", o.train.steps)->capture_default_str();
  train->add_option("--batch", o.train.batch_size)->capture_default_str();
  train->add_option("--seqlen", o.train.seq_len)->capture_default_str();
  train->add_option("--lr", o.train.adam.learning_rate)->capture_default_str();
  train->add_option("--seed", o.train.seed, "Batch sampling seed")->capture_default_str();
  train->add_option("--init-seed", o.init_seed)->capture_default_str();
  train->add_option("--d-model", o.model_cfg.d_model)->capture_default_str();
  train->add_option("--layers", o.model_cfg.n_layers)->capture_default_str();
  train->add_option("--heads", o.model_cfg.n_heads)->capture_default_str();
  train->add_option("--d-ff", o.model_cfg.d_ff)->capture_default_str();
  train->add_option("--max-seq-len", o.model_cfg.max_seq_len)->capture_default_str();

  auto* sample = app.add_subcommand("sample", "Draw a calibration set of random corpus windows");
  sample->add_option("--corpus", o.corpus)->required();
  sample->add_option("--n", o.n, "Number of sequences")->capture_default_str();
  sample->add_option("--seqlen", o.seq_len, "Tokens per sequence (L)")->capture_default_str();
  sample->add_option("--seed", o.seed)->capture_default_str();
  sample->add_flag("--concat", o.concat, "Sample from the BOS-joined corpus");
  sample->add_option("--out", o.out, "Output path (default stdout)");

  auto* generate = app.add_subcommand("generate", "Self-generate calibration samples from corpus prefixes");
  generate->add_option("--model", o.model)->required();
  generate->add_option("--corpus", o.corpus, "Prefix corpus")->required();
  generate->add_option("--count", o.count, "Samples to generate")->required();
  generate->add_option("--seed", o.seed)->capture_default_str();
  generate->add_option("--jobs", o.jobs)->capture_default_str();
  generate->add_option("--out", o.out, "Output path (default stdout)");
  AddGenerationFlags(generate, o.gen);

  auto* filter = app.add_subcommand("filter", "Drop the highest-perplexity generated samples");
  filter->add_option("--calib", o.calib, "Self-generated calibration file")->required();
  filter->add_option("--filter-rate", o.filter_rate)->capture_default_str();
  filter->add_option("--prefix-len", o.gen.prefix_len)->capture_default_str();
  filter->add_option("--out", o.out, "Output path (default stdout)");

  auto* prune = app.add_subcommand("prune", "Prune a model with calibration data");
  prune->add_option("--model", o.model)->required();
  prune->add_option("--calib", o.calib, "Calibration file (not needed for magnitude)");
  prune->add_option("--method", o.method, "magnitude | wanda | wanda_dsnot")->capture_default_str();
  prune->add_option("--sparsity", o.sparsity, "Ratio (0.5) or N:M (2:4)")->capture_default_str();
  prune->add_flag("--owl", o.owl, "Outlier-weighted layer-wise allocation");
  prune->add_option("--owl-lambda", o.owl_lambda)->capture_default_str();
  prune->add_option("--owl-m", o.owl_m)->capture_default_str();
  prune->add_option("--group", o.group, "row | layer")->capture_default_str();
  prune->add_option("--max-cycles", o.max_cycles, "DSnoT proposals per row")->capture_default_str();
  prune->add_option("--out", o.out, "Pruned weights output path")->required();
  prune->add_option("--masks", o.masks_out, "Also write run-length encoded masks");

  auto* eval = app.add_subcommand("eval", "Perplexity on a held-out corpus");
  eval->add_option("--model", o.model)->required();
  eval->add_option("--corpus", o.corpus)->required();
  eval->add_option("--seqlen", o.seq_len, "Evaluation window length")->default_val(128);

  auto* minkpp = app.add_subcommand("minkpp", "Min-K%++ score per sequence (JSONL)");
  minkpp->add_option("--model", o.model)->required();
  auto* mk_corpus = minkpp->add_option("--corpus", o.corpus, "Score non-overlapping corpus windows");
  auto* mk_calib = minkpp->add_option("--calib", o.calib, "Score a calibration file");
  mk_corpus->excludes(mk_calib);
  minkpp->add_option("--seqlen", o.seq_len, "Window length for --corpus")->default_val(128);
  minkpp->add_option("--k", o.k, "Fraction of lowest-scoring tokens")->capture_default_str();
  minkpp->add_option("--out", o.out, "Output path (default stdout)");

  auto* similarity = app.add_subcommand("similarity", "Exact and MinHash Jaccard similarity of two corpora");
  similarity->add_option("--a", o.a)->required();
  similarity->add_option("--b", o.b)->required();
  similarity->add_option("--ngram", o.ngram)->capture_default_str();
  similarity->add_option("--num-perms", o.num_perms)->capture_default_str();
  similarity->add_option("--seed", o.seed)->capture_default_str();
  similarity->add_flag("--bytes", o.bytes, "Byte n-grams instead of word n-grams");

  auto* experiment = app.add_subcommand("experiment", "Run a multi-seed calibration experiment");
  experiment->add_option("--config", o.config, "Experiment JSON")->required();
  experiment->add_option("--preset", o.preset, "desk: n=32, L=128, replicates=5, n_gen=512, N=256")
      ->check(CLI::IsMember({"desk"}));
  experiment->add_option("--n", o.x_n);
  experiment->add_option("--seqlen", o.x_seq_len);
  experiment->add_option("--replicates", o.x_replicates);
  experiment->add_option("--output-dir", o.output_dir);
  experiment->add_option("--jobs", o.jobs)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*fixture) return RunFixture(o);
    if (*train) return RunTrain(o);
    if (*sample) return RunSample(o);
    if (*generate) return RunGenerate(o);
    if (*filter) return RunFilter(o);
    if (*prune) return RunPrune(o);
    if (*eval) return RunEval(o);
    if (*minkpp) {
      cp::Require(!o.corpus.empty() || !o.calib.empty(), cp::ErrorCode::kInvalidArgument,
                  "one of --corpus or --calib is required");
      return RunMinKpp(o);
    }
    if (*similarity) return RunSimilarity(o);
    if (*experiment) return RunExperimentCmd(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "calibprune: %s\n", e.what());
    return kExitConfig;
  }
  return kExitConfig;
}
