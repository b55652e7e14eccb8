// Copyright 2026 The ratcap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Loading corpora, tokenizer and retrieval artifacts for one run, plus the
// run-level operations the command-line tool exposes.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ratcap/config.hpp"
#include "ratcap/corpus.hpp"
#include "ratcap/hnsw.hpp"
#include "ratcap/training.hpp"

namespace ratcap {

/// Library version string.
std::string version();

/// Everything a command needs, resolved from a RunConfig.
struct Workspace {
  RunConfig config;
  std::map<std::string, Corpus> splits;
  BpeTokenizer tokenizer;
  std::optional<Datastore> store;
  std::optional<HnswIndex> index;

  /// Throws CorpusError if the split was not loaded.
  const Corpus& split(const std::string& name) const;
  /// model config with feat_dim, vocab_size and k filled in from the data.
  ModelConfig model_config() const;
  TrainerInputs trainer_inputs() const;
  /// exact: ignore the index even when one is loaded.
  MemoryProvider memory(bool exact = false) const;
  /// Seed, config hash, corpus and artifact checksums, version.
  nlohmann::json repro(const std::string& command) const;
};

struct WorkspaceOptions {
  /// Splits to ingest besides "train" (always loaded).
  std::vector<std::string> splits;
  /// Build or load the datastore (and the index unless retrieval.exact).
  bool retrieval = true;
  /// Tokenizer file overriding data.tokenizer.
  std::string tokenizer;
};

Workspace open_workspace(const RunConfig& config, const WorkspaceOptions& options);

/// Manifest path of a split from the [data] section; throws ConfigError if
/// it is unset.
std::filesystem::path manifest_path(const DataConfig& data, const std::string& split);

/// Checkpoint plus tokenizer; a tokenizer.bpe next to the checkpoint is
/// used when present.
struct LoadedModel {
  Captioner model;
  std::optional<BpeTokenizer> tokenizer;
};
LoadedModel load_checkpoint(const std::filesystem::path& checkpoint);

/// Decodes every item of `items`, with captions and retrieved memory.
struct GenerateResult {
  std::vector<Prediction> predictions;
  MetricReport metrics;
};
GenerateResult generate_captions(const Captioner& model, const Workspace& ws, const Corpus& items, bool exact,
                                 std::size_t beam);

/// Writes model.ckpt (+ .state), tokenizer.bpe, config.txt, log.jsonl and
/// repro.json into `out_dir`.
struct TrainRun {
  PipelineResult result;
  std::filesystem::path checkpoint;
  nlohmann::json summary;
};
TrainRun run_training(const Workspace& ws, const std::filesystem::path& out_dir, bool log_wallclock = true);

/// One ablation variant: a name and the overrides defining it.
struct AblationVariant {
  std::string name;
  std::vector<std::string> overrides;
};

struct AblationRow {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricReport> final_val;
  std::vector<double> val_loss;
  double median_cider = 0.0;
  double median_bleu4 = 0.0;
  double median_rouge_l = 0.0;
  double median_val_loss = 0.0;
  nlohmann::json to_json() const;
};

/// Trains every variant once per seed (train.seed = seed); variants differ
/// from `base` only by their overrides.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> values);

}  // namespace ratcap
