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

// Cross-entropy pre-training and self-critical fine-tuning with a
// mean-of-beam baseline.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ratcap/corpus.hpp"
#include "ratcap/hnsw.hpp"
#include "ratcap/metrics.hpp"
#include "ratcap/model.hpp"
#include "ratcap/retrieval.hpp"
#include "ratcap/tokenizer.hpp"

namespace ratcap {

/// Non-finite loss or gradient; training stops with the last good weights.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t warmup_steps = 200;
  std::size_t batch_size = 8;
  std::size_t grad_accum_steps = 1;
  std::size_t xe_steps = 1000;
  std::size_t scst_steps = 100;
  double scst_lr = 5e-6;
  std::size_t scst_beam = 5;
  std::uint64_t seed = 1234;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  /// Multiplies the warmup schedule during XE.
  double lr_scale = 1.0;
  double clip_norm = 1.0;
  std::size_t validate_every = 200;
  /// Validations without improvement before a stage stops early.
  std::size_t patience = 10;
  /// Validation items scored per validation (0 = all).
  std::size_t val_items = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Mean NLL of target[t+1] under logits row t; PAD targets are skipped.
/// logits has target.size() - 1 rows. Throws if every target is PAD.
Tensor xe_loss(const Tensor& logits, const TokenSequence& target);

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5); step counts from 1.
double lr_schedule(std::size_t step, std::size_t d, std::size_t warmup);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. Throws NumericalAbort if it is not
/// finite.
double clip_grad_norm(ParameterList& params, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterList& params, AdamConfig cfg);

  void step(ParameterList& params, double lr);
  std::uint64_t steps() const { return t_; }

  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One teacher-forced example: an image, one of its captions and the
/// captions retrieved for it.
struct Example {
  const CorpusItem* item = nullptr;
  TokenSequence target;
  std::vector<TokenSequence> memory;
};

struct StepStats {
  double loss = 0.0;  // XE: mean example loss; SCST: mean beam reward
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t examples = 0;
};

/// Accumulates gradients over all micro-batches (each example weighted
/// 1 / total examples), clips, and takes one Adam step.
StepStats xe_train_step(Captioner& model, Adam& opt, std::span<const std::vector<Example>> micro_batches, double lr,
                        double clip_norm);

/// Rewards on a 2^-40 grid so the advantages are exact integers.
inline constexpr double kRewardQuantum = 0x1.0p-40;

/// A_i = B * R_i - sum(R) for rewards quantized to kRewardQuantum. The
/// advantage r_i - mean(r) of the quantized rewards is A_i * quantum / B,
/// and sum(A_i) == 0 exactly.
std::vector<std::int64_t> quantized_advantages(std::span<const double> rewards);

/// Sum of token log-probabilities of `seq` (BOS first) under the model.
Tensor sequence_log_prob(const Captioner& model, const TokenSequence& seq, const Tensor& enc_out,
                         const MemoryEncoding& memory);

struct ScstImage {
  const CorpusItem* item = nullptr;
  std::vector<TokenSequence> memory;
};

/// Reward of a decoded sequence for image `index` of the batch.
using RewardFn = std::function<double(const TokenSequence& sequence, std::size_t index)>;

struct ScstStats {
  double mean_reward = 0.0;
  double grad_norm = 0.0;
  std::size_t zero_advantage_images = 0;
  /// Sum of the integer advantages over all beams (0 by construction).
  std::int64_t advantage_sum = 0;
};

/// Per image: beam search, reward each beam, baseline = mean reward, loss
/// -(1/B) sum (r_i - b) log P(seq_i), averaged over images. Images whose
/// advantages are all zero contribute no gradient and are counted.
ScstStats scst_step(Captioner& model, Adam& opt, std::span<const ScstImage> batch, std::size_t beam, double lr,
                    double clip_norm, const RewardFn& reward);

/// Supplies retrieved captions, excluding the query's own image. Results
/// are cached per image id; the store and index are never modified.
class MemoryProvider {
 public:
  MemoryProvider(const Datastore* store, const HnswIndex* index, RetrievalConfig cfg, const BpeTokenizer* tokenizer);

  /// Empty when there is no store. A retrieval error yields empty memory
  /// and is counted.
  const std::vector<TokenSequence>& fetch(const FeatureGrid& grid);
  std::size_t failures() const { return failures_; }
  /// Called once per fresh retrieval (instrumentation).
  std::function<void(const std::string& query_id, const RetrievalResult&)> observer;

 private:
  const Datastore* store_;
  const HnswIndex* index_;
  RetrievalConfig cfg_;
  const BpeTokenizer* tokenizer_;
  std::unordered_map<std::string, std::vector<TokenSequence>> cache_;
  std::size_t failures_ = 0;
};

/// Step counters, optimizer moments, running statistics and RNG state.
struct TrainState {
  std::size_t xe_step = 0;
  std::size_t scst_step = 0;
  Adam xe_opt;
  Adam scst_opt;
  std::mt19937_64 rng;
  /// Shuffled (item, caption) order and the position in it.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> order;
  std::size_t cursor = 0;
  std::size_t image_cursor = 0;
  std::vector<std::uint32_t> image_order;
  double ema_loss = 0.0;
  double ema_reward = 0.0;
  double best_val = -1.0;
  std::size_t bad_validations = 0;
  std::size_t zero_advantage_images = 0;

  /// "RTSTATE1", u64 header length, JSON header, little-endian f64 moments.
  std::string serialize() const;
  static TrainState deserialize(std::string_view bytes);
};

struct Prediction {
  std::string image_id;
  std::string caption;
  TokenSequence tokens;
  std::vector<std::string> retrieved;
};

/// Greedy (beam == 1) or beam decoding of every item, then corpus metrics
/// against the items' own captions.
MetricReport evaluate_model(const Captioner& model, std::span<const CorpusItem> items, MemoryProvider& memory,
                            const BpeTokenizer& tokenizer, std::size_t beam = 1,
                            std::vector<Prediction>* predictions = nullptr);

/// Mean teacher-forced XE over every (item, caption) pair.
double validation_xe_loss(const Captioner& model, std::span<const CorpusItem> items, MemoryProvider& memory,
                          const BpeTokenizer& tokenizer);

struct TrainerInputs {
  const Corpus* train = nullptr;
  const Corpus* val = nullptr;
  const BpeTokenizer* tokenizer = nullptr;
  const Datastore* store = nullptr;  // null for the no-memory model
  const HnswIndex* index = nullptr;  // null: exact search
  RetrievalConfig retrieval;
};

/// Owns the model, optimizer state and data order for one run.
class Trainer {
 public:
  Trainer(ModelConfig model_cfg, TrainConfig cfg, TrainerInputs inputs);
  // Scorers point into train_idf_.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  Captioner& model() { return model_; }
  const Captioner& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  MemoryProvider& memory() { return memory_; }

  /// One XE optimizer step over batch_size * grad_accum_steps examples.
  StepStats xe_step();
  /// One SCST step over batch_size images with CIDEr-D rewards.
  ScstStats scst_step();
  /// Greedy validation on (up to val_items of) the val split.
  MetricReport validate();
  /// Teacher-forced XE on the same validation items.
  double validation_loss();

  /// Model checkpoint plus `<path>.state`.
  void save(const std::filesystem::path& checkpoint) const;
  void resume(const std::filesystem::path& checkpoint);

  std::size_t empty_memory_examples() const { return empty_memory_examples_; }

 private:
  void reshuffle_examples();
  void reshuffle_images();
  const std::vector<TokenSequence>& memory_for(const CorpusItem& item);

  TrainConfig cfg_;
  TrainerInputs in_;
  Captioner model_;
  TrainState state_;
  MemoryProvider memory_;
  std::vector<std::vector<TokenSequence>> targets_;  // per train item
  IdfTable train_idf_;
  std::vector<std::optional<CiderScorer>> scorers_;
  std::size_t empty_memory_examples_ = 0;
};

struct PipelineOptions {
  std::ostream* log = nullptr;  // JSON lines
  std::optional<std::filesystem::path> checkpoint;  // best model written here
  bool log_wallclock = true;
};

struct PipelineResult {
  std::optional<Captioner> best;
  std::optional<Captioner> last;
  MetricReport xe_val;     // at the end of XE
  MetricReport final_val;  // at the end of SCST
  double xe_val_loss = 0.0;  // validation XE at the end of XE
  double best_val_cider = -1.0;
  std::size_t xe_steps = 0;
  std::size_t scst_steps = 0;
  bool aborted = false;
  std::string abort_reason;
};

/// XE then SCST with periodic validation, early stopping and best-model
/// retention. A non-finite loss ends the run with aborted = true and the
/// best weights so far in `best`.
PipelineResult train_pipeline(const ModelConfig& model_cfg, const TrainConfig& cfg, const TrainerInputs& inputs,
                              const PipelineOptions& options = {});

}  // namespace ratcap
