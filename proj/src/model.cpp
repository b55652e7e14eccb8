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

#include "ratcap/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ratcap/random.hpp"
#include "ratcap/retrieval.hpp"

namespace ratcap {

namespace {

constexpr char kCheckpointMagic[] = "RATCAP1";
constexpr std::size_t kCheckpointMagicLen = 7;

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(rng_); }
  Tensor uniform_tensor(Shape shape, double bound) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(v));
  }

 private:
  std::mt19937_64 rng_;
};

std::string layer_name(const char* stack, std::size_t i) { return std::string(stack) + ".layer" + std::to_string(i); }

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t pos) {
  if (pos + 8 > bytes.size()) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::string to_string(MemoryMode m) {
  switch (m) {
    case MemoryMode::kGated: return "gated";
    case MemoryMode::kSequential: return "sequential";
    case MemoryMode::kNone: return "none";
  }
  return "?";
}

MemoryMode parse_memory_mode(std::string_view name) {
  if (name == "gated") return MemoryMode::kGated;
  if (name == "sequential") return MemoryMode::kSequential;
  if (name == "none") return MemoryMode::kNone;
  throw ConfigError("unknown memory mode '" + std::string(name) + "' (gated|sequential|none)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model: ") + name + " must be at least 1");
  };
  positive(d, "d");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(heads, "heads");
  positive(mem_layers, "mem_layers");
  positive(k, "k");
  positive(ffn_mult, "ffn_mult");
  positive(feat_dim, "feat_dim");
  positive(max_grid, "max_grid");
  if (d % heads != 0)
    throw ConfigError("model: d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (max_len < 2) throw ConfigError("model: max_len must be at least 2");
  if (vocab_size <= static_cast<std::size_t>(kEosId)) throw ConfigError("model: vocab_size must exceed the specials");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d", d},
          {"enc_layers", enc_layers},
          {"dec_layers", dec_layers},
          {"heads", heads},
          {"mem_layers", mem_layers},
          {"k", k},
          {"max_len", max_len},
          {"vocab_size", vocab_size},
          {"ffn_mult", ffn_mult},
          {"feat_dim", feat_dim},
          {"memory_mode", to_string(memory_mode)},
          {"shared_gate", shared_gate},
          {"visual_positions", visual_positions},
          {"max_grid", max_grid}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mem_layers = j.at("mem_layers").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.feat_dim = j.at("feat_dim").get<std::size_t>();
  c.memory_mode = parse_memory_mode(j.at("memory_mode").get<std::string>());
  c.shared_gate = j.at("shared_gate").get<bool>();
  c.visual_positions = j.at("visual_positions").get<bool>();
  c.max_grid = j.at("max_grid").get<std::size_t>();
  c.validate();
  return c;
}

std::vector<double> sinusoid(std::size_t position, std::size_t d) {
  std::vector<double> row(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * freq;
    row[i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  return row;
}

// --- construction -----------------------------------------------------------

Captioner::Captioner(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build(seed);
}

void Captioner::build(std::uint64_t seed) {
  Init init(seed);
  const std::size_t d = cfg_.d, hidden = cfg_.d * cfg_.ffn_mult;

  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Linear l;
    l.weight = params_.add(name + ".w", init.uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
    l.bias = params_.add(name + ".b", Tensor::zeros({out}));
    return l;
  };
  auto norm = [&](const std::string& name) {
    Norm n;
    n.gain = params_.add(name + ".g", Tensor::from({d}, std::vector<double>(d, 1.0)));
    n.bias = params_.add(name + ".b", Tensor::zeros({d}));
    return n;
  };
  auto attention_weights = [&](const std::string& name) {
    return AttentionWeights{linear(name + ".query", d, d), linear(name + ".key", d, d), linear(name + ".value", d, d),
                            linear(name + ".output", d, d)};
  };
  auto ffn = [&](const std::string& name) { return Ffn{linear(name + ".in", d, hidden), linear(name + ".out", hidden, d)}; };
  auto encoder_stack = [&](const char* stack, std::size_t layers) {
    std::vector<EncoderLayer> out;
    for (std::size_t i = 0; i < layers; ++i) {
      const auto p = layer_name(stack, i);
      EncoderLayer l;
      l.ln1 = norm(p + ".ln1");
      l.attn = attention_weights(p + ".attn");
      l.ln2 = norm(p + ".ln2");
      l.ffn = ffn(p + ".ffn");
      out.push_back(std::move(l));
    }
    return out;
  };

  token_embedding_ = params_.add("embed.tokens", init.uniform_tensor({cfg_.vocab_size, d}, 1.0));
  visual_in_ = linear("encoder.input", cfg_.feat_dim, d);
  if (cfg_.visual_positions) visual_pos_ = params_.add("encoder.positions", init.uniform_tensor({cfg_.max_grid, d}, 0.1));
  encoder_ = encoder_stack("encoder", cfg_.enc_layers);
  encoder_final_ = norm("encoder.ln_final");

  const bool has_memory = cfg_.memory_mode != MemoryMode::kNone;
  if (has_memory) {
    memory_encoder_ = encoder_stack("memory", cfg_.mem_layers);
    memory_final_ = norm("memory.ln_final");
  }

  if (cfg_.memory_mode == MemoryMode::kGated && cfg_.shared_gate) gates_.push_back(params_.add("decoder.gate.s", Tensor::zeros({1})));
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    const auto p = layer_name("decoder", i);
    DecoderLayer l;
    l.ln1 = norm(p + ".ln1");
    switch (cfg_.memory_mode) {
      case MemoryMode::kGated:
        l.query = linear(p + ".knn.query", d, d);
        l.local_key = linear(p + ".knn.local.key", d, d);
        l.local_value = linear(p + ".knn.local.value", d, d);
        l.local_output = linear(p + ".knn.local.output", d, d);
        l.mem_key = linear(p + ".knn.memory.key", d, d);
        l.mem_value = linear(p + ".knn.memory.value", d, d);
        l.mem_output = linear(p + ".knn.memory.output", d, d);
        if (cfg_.shared_gate) {
          l.gate = 0;
        } else {
          l.gate = gates_.size();
          gates_.push_back(params_.add(p + ".gate.s", Tensor::zeros({1})));
        }
        break;
      case MemoryMode::kSequential:
        l.self = attention_weights(p + ".self");
        l.ln_mem = norm(p + ".ln_mem");
        l.memory = attention_weights(p + ".memory");
        break;
      case MemoryMode::kNone:
        l.self = attention_weights(p + ".self");
        break;
    }
    l.ln2 = norm(p + ".ln2");
    l.cross = attention_weights(p + ".cross");
    l.ln3 = norm(p + ".ln3");
    l.ffn = ffn(p + ".ffn");
    decoder_.push_back(std::move(l));
  }
  decoder_final_ = norm("decoder.ln_final");
  output_ = linear("output", d, cfg_.vocab_size);
}

// --- forward ----------------------------------------------------------------

Tensor Captioner::run_encoder(const std::vector<EncoderLayer>& layers, const Norm& final, Tensor x,
                              const AttentionMask* mask) const {
  for (const auto& l : layers) {
    const Tensor h = l.ln1(x);
    x = add(x, multi_head_attention(h, h, mask, l.attn, cfg_.heads));
    x = add(x, l.ffn(l.ln2(x)));
  }
  return final(x);
}

Tensor Captioner::embed_tokens(std::span<const int> ids, std::size_t first_position) const {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(cfg_.vocab_size));
  std::vector<double> pos;
  pos.reserve(ids.size() * cfg_.d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto row = sinusoid(first_position + t, cfg_.d);
    pos.insert(pos.end(), row.begin(), row.end());
  }
  return add(embedding(token_embedding_, ids), Tensor::matrix(ids.size(), cfg_.d, std::move(pos)));
}

Tensor Captioner::encode_image(const Tensor& grid) const {
  if (grid.dim() != 2 || grid.rows() == 0) throw ShapeError("encode_image: grid must be a non-empty matrix");
  if (grid.cols() != cfg_.feat_dim)
    throw ShapeError("encode_image: grid has " + std::to_string(grid.cols()) + " features, model expects " +
                     std::to_string(cfg_.feat_dim));
  Tensor x = visual_in_(grid);
  if (cfg_.visual_positions) {
    if (grid.rows() > cfg_.max_grid) throw ShapeError("encode_image: grid has more positions than max_grid");
    x = add(x, slice_rows(visual_pos_, 0, grid.rows()));
  }
  return run_encoder(encoder_, encoder_final_, x, nullptr);
}

MemoryEncoding Captioner::encode_memory(std::span<const TokenSequence> captions) const {
  MemoryEncoding mem;
  if (cfg_.memory_mode == MemoryMode::kNone) return mem;
  std::size_t offset = 0;
  for (const auto& c : captions) {
    if (c.ids.empty()) continue;
    if (c.size() > cfg_.max_len)
      throw ShapeError("encode_memory: caption of " + std::to_string(c.size()) + " tokens exceeds max_len");
    mem.captions.push_back(run_encoder(memory_encoder_, memory_final_, embed_tokens(c.ids, 0), nullptr));
    mem.offsets.push_back(offset);
    offset += c.size();
  }
  if (!mem.captions.empty()) mem.keys = concat_rows(mem.captions);
  return mem;
}

KnnParts Captioner::knn_attention(std::size_t layer, const Tensor& x_norm, const MemoryEncoding& memory) const {
  if (cfg_.memory_mode != MemoryMode::kGated) throw ConfigError("knn_attention: model is not gated");
  const auto& l = decoder_.at(layer);
  const std::size_t h = cfg_.heads;
  const Tensor q = l.query(x_norm);
  const AttentionMask causal = AttentionMask::causal(x_norm.rows());
  KnnParts parts;
  parts.local = l.local_output(attention(q, l.local_key(x_norm), l.local_value(x_norm), h, &causal));
  parts.alpha = sigmoid(gates_[l.gate]);
  if (memory.empty()) {
    empty_memory_events_->fetch_add(1);
    parts.mixed = parts.local;
    return parts;
  }
  parts.memory = l.mem_output(attention(q, l.mem_key(memory.keys), l.mem_value(memory.keys), h));
  parts.mixed = add(mul_scalar(parts.alpha, parts.local), mul_scalar(rsub(1.0, parts.alpha), parts.memory));
  return parts;
}

Tensor Captioner::decoder_forward(std::span<const int> tokens, const Tensor& enc_out,
                                  const MemoryEncoding& memory) const {
  if (tokens.empty() || tokens.front() != kBosId) throw std::invalid_argument("decoder_forward: tokens must start with BOS");
  if (tokens.size() > cfg_.max_len)
    throw ShapeError("decoder_forward: " + std::to_string(tokens.size()) + " tokens exceed max_len " +
                     std::to_string(cfg_.max_len));
  Tensor x = embed_tokens(tokens, 0);
  const AttentionMask causal = AttentionMask::causal(tokens.size());
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& l = decoder_[i];
    const Tensor xn = l.ln1(x);
    if (cfg_.memory_mode == MemoryMode::kGated) {
      x = add(x, knn_attention(i, xn, memory).mixed);
    } else {
      x = add(x, multi_head_attention(xn, xn, &causal, l.self, cfg_.heads));
      if (cfg_.memory_mode == MemoryMode::kSequential && !memory.empty())
        x = add(x, multi_head_attention(l.ln_mem(x), memory.keys, nullptr, l.memory, cfg_.heads));
    }
    x = add(x, multi_head_attention(l.ln2(x), enc_out, nullptr, l.cross, cfg_.heads));
    x = add(x, l.ffn(l.ln3(x)));
  }
  return output_(decoder_final_(x));
}

// --- incremental decoding ---------------------------------------------------

DecoderState Captioner::start(const Tensor& enc_out, const MemoryEncoding& memory) const {
  NoGradGuard no_grad;
  DecoderState st;
  st.memory_empty = memory.empty();
  for (const auto& l : decoder_) {
    DecoderState::Layer c;
    if (!memory.empty() && cfg_.memory_mode == MemoryMode::kGated) {
      c.mem_k = l.mem_key(memory.keys);
      c.mem_v = l.mem_value(memory.keys);
    } else if (!memory.empty() && cfg_.memory_mode == MemoryMode::kSequential) {
      c.mem_k = l.memory.key(memory.keys);
      c.mem_v = l.memory.value(memory.keys);
    }
    c.cross_k = l.cross.key(enc_out);
    c.cross_v = l.cross.value(enc_out);
    st.layers.push_back(std::move(c));
  }
  if (memory.empty() && cfg_.memory_mode == MemoryMode::kGated) empty_memory_events_->fetch_add(decoder_.size());
  return st;
}

std::vector<double> Captioner::step(DecoderState& st, int token) const {
  NoGradGuard no_grad;
  const std::size_t pos = st.tokens.size(), d = cfg_.d, h = cfg_.heads;
  if (pos >= cfg_.max_len) throw ShapeError("step: sequence already at max_len");
  if (pos == 0 && token != kBosId) throw std::invalid_argument("step: first token must be BOS");
  const int ids[1] = {token};
  Tensor x = embed_tokens(ids, pos);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& l = decoder_[i];
    auto& c = st.layers[i];
    const Tensor xn = l.ln1(x);
    const bool gated = cfg_.memory_mode == MemoryMode::kGated;
    const Linear& wq = gated ? l.query : l.self.query;
    const Linear& wk = gated ? l.local_key : l.self.key;
    const Linear& wv = gated ? l.local_value : l.self.value;
    const Linear& wo = gated ? l.local_output : l.self.output;
    const Tensor q = wq(xn);
    const Tensor k = wk(xn), v = wv(xn);
    c.self_k.insert(c.self_k.end(), k.data().begin(), k.data().end());
    c.self_v.insert(c.self_v.end(), v.data().begin(), v.data().end());
    const Tensor keys = Tensor::matrix(pos + 1, d, c.self_k), values = Tensor::matrix(pos + 1, d, c.self_v);
    const Tensor local = wo(attention(q, keys, values, h));
    if (gated) {
      if (st.memory_empty) {
        x = add(x, local);
      } else {
        const Tensor alpha = sigmoid(gates_[l.gate]);
        const Tensor mem = l.mem_output(attention(q, c.mem_k, c.mem_v, h));
        x = add(x, add(mul_scalar(alpha, local), mul_scalar(rsub(1.0, alpha), mem)));
      }
    } else {
      x = add(x, local);
      if (cfg_.memory_mode == MemoryMode::kSequential && !st.memory_empty)
        x = add(x, l.memory.output(attention(l.memory.query(l.ln_mem(x)), c.mem_k, c.mem_v, h)));
    }
    x = add(x, l.cross.output(attention(l.cross.query(l.ln2(x)), c.cross_k, c.cross_v, h)));
    x = add(x, l.ffn(l.ln3(x)));
  }
  st.tokens.push_back(token);
  const Tensor lp = log_softmax(output_(decoder_final_(x)));
  std::vector<double> out(lp.data().begin(), lp.data().end());
  out[kPadId] = -std::numeric_limits<double>::infinity();
  out[kBosId] = -std::numeric_limits<double>::infinity();
  return out;
}

TokenSequence Captioner::greedy_decode(const Tensor& enc_out, const MemoryEncoding& memory) const {
  NoGradGuard no_grad;
  DecoderState st = start(enc_out, memory);
  TokenSequence seq{{kBosId}};
  auto lp = step(st, kBosId);
  while (true) {
    int best = -1;
    for (std::size_t t = 0; t < lp.size(); ++t)
      if (std::isfinite(lp[t]) && (best < 0 || lp[t] > lp[best])) best = static_cast<int>(t);
    seq.ids.push_back(best);
    if (best == kEosId || seq.size() >= cfg_.max_len) break;
    lp = step(st, best);
  }
  return seq;
}

std::vector<Captioner::Beam> Captioner::beam_search_decode(const Tensor& enc_out, const MemoryEncoding& memory,
                                                           std::size_t beam_size) const {
  NoGradGuard no_grad;
  auto hyps = beam_search(start(enc_out, memory), beam_size, cfg_.max_len, kBosId, kEosId,
                          [this](DecoderState& s, int t) { return step(s, t); });
  std::vector<Beam> out;
  for (auto& h : hyps) out.push_back({TokenSequence{std::move(h.tokens)}, h.log_prob, h.score});
  return out;
}

// --- gates and audit --------------------------------------------------------

const Tensor& Captioner::gate_logit(std::size_t layer) const {
  if (cfg_.memory_mode != MemoryMode::kGated) throw ConfigError("model has no gate");
  return gates_.at(decoder_.at(layer).gate);
}

void Captioner::set_gate_logit(std::size_t layer, double s) {
  Tensor g = gate_logit(layer);
  g.mutable_data()[0] = s;
}

double Captioner::gate_alpha(std::size_t layer) const { return 1.0 / (1.0 + std::exp(-gate_logit(layer).item())); }

std::vector<double> Captioner::gate_alphas() const {
  std::vector<double> out;
  if (cfg_.memory_mode != MemoryMode::kGated) return out;
  for (std::size_t i = 0; i < decoder_.size(); ++i) out.push_back(gate_alpha(i));
  return out;
}

ParameterAudit Captioner::audit_knn_layer(std::size_t layer) const {
  if (layer >= decoder_.size()) throw std::out_of_range("audit_knn_layer: no such layer");
  const std::string prefix = layer_name("decoder", layer) + ".knn.";
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  ParameterAudit a;
  for (const auto& p : params_.items()) {
    if (p.name.rfind(prefix, 0) != 0 || !ends_with(p.name, ".w")) continue;
    if (ends_with(p.name, "query.w")) ++a.query;
    else if (ends_with(p.name, "key.w")) ++a.key;
    else if (ends_with(p.name, "value.w")) ++a.value;
    else if (ends_with(p.name, "output.w")) ++a.output;
  }
  const std::string own_gate = layer_name("decoder", layer) + ".gate.s";
  for (const auto& p : params_.items())
    if (p.name == own_gate || p.name == "decoder.gate.s") ++a.gate;
  return a;
}

// --- checkpoints ------------------------------------------------------------

std::string Captioner::serialize() const {
  static_assert(sizeof(double) == 8);
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params_.items()) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel() * 8;
  }
  const std::string header =
      nlohmann::json{{"config", cfg_.to_json()}, {"parameters", manifest}, {"data_bytes", offset}}.dump();
  std::string out(kCheckpointMagic, kCheckpointMagicLen);
  put_u64(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& p : params_.items())
    for (double v : p.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Captioner Captioner::deserialize(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagicLen) != std::string_view(kCheckpointMagic, kCheckpointMagicLen))
    throw std::runtime_error("checkpoint: bad magic (expected RATCAP1)");
  const std::uint64_t header_len = get_u64(bytes, kCheckpointMagicLen);
  const std::size_t header_at = kCheckpointMagicLen + 8;
  if (header_at + header_len > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_at, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad header: ") + e.what());
  }
  Captioner model;
  model.cfg_ = ModelConfig::from_json(header.at("config"));
  model.build(0);
  const auto& manifest = header.at("parameters");
  auto& items = model.params_.items();
  if (manifest.size() != items.size()) throw std::runtime_error("checkpoint: parameter count differs from config");
  const std::size_t data_at = header_at + header_len;
  const std::size_t data_bytes = header.at("data_bytes").get<std::size_t>();
  if (data_at + data_bytes != bytes.size()) throw std::runtime_error("checkpoint: data size mismatch");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& m = manifest[i];
    auto& p = items[i];
    if (m.at("name").get<std::string>() != p.name || m.at("shape").get<Shape>() != p.tensor.shape())
      throw std::runtime_error("checkpoint: parameter '" + m.at("name").get<std::string>() +
                               "' does not match the architecture");
    const std::size_t off = data_at + m.at("offset").get<std::size_t>();
    auto dst = p.tensor.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = std::bit_cast<double>(get_u64(bytes, off + 8 * j));
  }
  return model;
}

void Captioner::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Captioner Captioner::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t Captioner::checksum() const { return fnv1a(serialize()); }

void Captioner::copy_parameters_from(const Captioner& other) {
  auto& mine = params_.items();
  const auto& theirs = other.params_.items();
  if (mine.size() != theirs.size()) throw std::invalid_argument("copy_parameters_from: architectures differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].tensor.shape() != theirs[i].tensor.shape())
      throw std::invalid_argument("copy_parameters_from: parameter '" + mine[i].name + "' differs");
    auto dst = mine[i].tensor.mutable_data();
    auto src = theirs[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace ratcap
