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

// Retrieval-augmented encoder-decoder captioner: visual encoder, memory
// encoder over retrieved captions, and a decoder whose first sublayer mixes
// causal self-attention with memory cross-attention through a learned gate.

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ratcap/ops.hpp"
#include "ratcap/tensor.hpp"
#include "ratcap/tokenizer.hpp"

namespace ratcap {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// gated: shared-query kNN attention with a sigmoid gate.
/// sequential: self-attention, then memory cross-attention (no gate).
/// none: plain encoder-decoder, no memory parameters at all.
enum class MemoryMode { kGated, kSequential, kNone };

std::string to_string(MemoryMode m);
MemoryMode parse_memory_mode(std::string_view name);

struct ModelConfig {
  std::size_t d = 384;
  std::size_t enc_layers = 3;
  std::size_t dec_layers = 3;
  std::size_t heads = 6;
  std::size_t mem_layers = 1;
  std::size_t k = 10;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t vocab_size = 4096;
  std::size_t ffn_mult = 4;
  std::size_t feat_dim = 0;
  MemoryMode memory_mode = MemoryMode::kGated;
  /// One gate scalar for the whole decoder instead of one per layer.
  bool shared_gate = false;
  /// Learned positions on grid features (off: the encoder is permutation
  /// equivariant over grid positions).
  bool visual_positions = false;
  std::size_t max_grid = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Retrieved captions, each encoded on its own.
struct MemoryEncoding {
  std::vector<Tensor> captions;  // [T_i x d] each
  Tensor keys;                   // row concatenation; undefined when empty
  std::vector<std::size_t> offsets;

  bool empty() const { return captions.empty(); }
  std::size_t tokens() const { return empty() ? 0 : keys.rows(); }
};

/// The two branches of a kNN-augmented layer before the residual add.
struct KnnParts {
  Tensor local;
  Tensor memory;  // undefined for empty memory
  Tensor alpha;   // [1]
  Tensor mixed;
};

/// Incremental decoding state: per-layer key/value caches for the local
/// branch plus the precomputed memory and visual keys/values.
struct DecoderState {
  struct Layer {
    std::vector<double> self_k, self_v;  // grows by d per consumed token
    Tensor mem_k, mem_v;                 // projected memory (if any)
    Tensor cross_k, cross_v;             // projected encoder output
  };
  std::vector<Layer> layers;
  std::vector<int> tokens;
  bool memory_empty = true;

  std::size_t length() const { return tokens.size(); }
};

struct ParameterAudit {
  std::size_t query = 0, key = 0, value = 0, output = 0, gate = 0;
};

class Captioner {
 public:
  Captioner(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterList& params() { return params_; }
  const ParameterList& params() const { return params_; }

  /// Grid [P x feat_dim] to [P x d].
  Tensor encode_image(const Tensor& grid) const;
  MemoryEncoding encode_memory(std::span<const TokenSequence> captions) const;
  /// Teacher-forced logits [T x vocab]; row t predicts token t+1.
  Tensor decoder_forward(std::span<const int> tokens, const Tensor& enc_out, const MemoryEncoding& memory) const;

  /// Layer `layer`'s kNN-augmented sublayer on already-normalized input.
  KnnParts knn_attention(std::size_t layer, const Tensor& x_norm, const MemoryEncoding& memory) const;

  DecoderState start(const Tensor& enc_out, const MemoryEncoding& memory) const;
  /// Consumes `token` and returns log-probabilities [vocab] for the next one.
  std::vector<double> step(DecoderState& state, int token) const;

  /// Greedy argmax decoding (ties to the lowest id) until EOS or max_len.
  TokenSequence greedy_decode(const Tensor& enc_out, const MemoryEncoding& memory) const;

  struct Beam {
    TokenSequence sequence;
    double log_prob = 0.0;
    double score = 0.0;  // log_prob / generated tokens
  };
  std::vector<Beam> beam_search_decode(const Tensor& enc_out, const MemoryEncoding& memory,
                                       std::size_t beam_size) const;

  std::size_t gate_count() const { return gates_.size(); }
  /// Gate of decoder layer `layer` (the shared gate when configured).
  const Tensor& gate_logit(std::size_t layer) const;
  void set_gate_logit(std::size_t layer, double s);
  double gate_alpha(std::size_t layer) const;
  std::vector<double> gate_alphas() const;

  ParameterAudit audit_knn_layer(std::size_t layer) const;

  /// Times a gated layer saw empty memory and fell back to the local branch.
  std::size_t empty_memory_events() const { return empty_memory_events_->load(); }

  /// "RATCAP1", u64 header length, JSON header (config + manifest), then
  /// little-endian f64 parameter data.
  std::string serialize() const;
  static Captioner deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Captioner load(const std::filesystem::path& path);
  std::uint64_t checksum() const;

  /// Copies parameter values from `other` (same architecture).
  void copy_parameters_from(const Captioner& other);

 private:
  struct Norm {
    Tensor gain, bias;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  };
  struct Ffn {
    Linear in, out;
    Tensor operator()(const Tensor& x) const { return out(relu(in(x))); }
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    AttentionWeights attn;
    Ffn ffn;
  };
  struct DecoderLayer {
    Norm ln1, ln_mem, ln2, ln3;
    // gated: shared query plus per-branch key/value/output.
    Linear query;
    Linear local_key, local_value, local_output;
    Linear mem_key, mem_value, mem_output;
    // sequential / none: ordinary self-attention; sequential adds memory
    // cross-attention with its own query.
    AttentionWeights self;
    AttentionWeights memory;
    AttentionWeights cross;
    Ffn ffn;
    std::size_t gate = 0;
  };

  Captioner() = default;
  void build(std::uint64_t seed);
  Tensor run_encoder(const std::vector<EncoderLayer>& layers, const Norm& final, Tensor x,
                     const AttentionMask* mask) const;
  Tensor embed_tokens(std::span<const int> ids, std::size_t first_position) const;

  ModelConfig cfg_;
  ParameterList params_;
  Tensor token_embedding_;
  Linear visual_in_;
  Tensor visual_pos_;
  std::vector<EncoderLayer> encoder_;
  Norm encoder_final_;
  std::vector<EncoderLayer> memory_encoder_;
  Norm memory_final_;
  std::vector<DecoderLayer> decoder_;
  std::vector<Tensor> gates_;
  Norm decoder_final_;
  Linear output_;
  std::shared_ptr<std::atomic<std::size_t>> empty_memory_events_ = std::make_shared<std::atomic<std::size_t>>(0);
};

/// Sinusoidal position table row for `position`, width d.
std::vector<double> sinusoid(std::size_t position, std::size_t d);

struct BeamHypothesis {
  std::vector<int> tokens;  // starts with BOS
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;
};

/// Length-normalized beam search. `step(state, token)` consumes a token and
/// returns log-probabilities over the vocabulary for the next one; -inf
/// marks tokens that may not be produced. Finished hypotheses leave the
/// active beam and keep their slot. Expansions are ranked by cumulative log-prob, then step
/// log-prob, parent order and lowest token id; results are sorted by score.
template <class State, class Step>
std::vector<BeamHypothesis> beam_search(State initial, std::size_t beam_size, std::size_t max_len, int bos, int eos,
                                        Step&& step);

}  // namespace ratcap

#include "ratcap/beam_search_impl.hpp"
