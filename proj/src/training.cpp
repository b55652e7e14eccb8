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

#include "ratcap/training.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ratcap/random.hpp"

namespace ratcap {

namespace {

constexpr char kStateMagic[] = "RTSTATE1";
constexpr std::size_t kStateMagicLen = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t pos) {
  if (pos + 8 > bytes.size()) throw std::runtime_error("train state: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

Captioner deep_copy(const Captioner& m) { return Captioner::deserialize(m.serialize()); }

}  // namespace

// --- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("train: ") + name + " must be at least 1");
  };
  positive(warmup_steps, "warmup_steps");
  positive(batch_size, "batch_size");
  positive(grad_accum_steps, "grad_accum_steps");
  positive(validate_every, "validate_every");
  positive(patience, "patience");
  if (scst_beam < 2) throw ConfigError("train: scst_beam must be at least 2 (the baseline needs two rewards)");
  if (!(scst_lr > 0.0) || !(lr_scale > 0.0) || !(clip_norm > 0.0) || !(adam_eps > 0.0))
    throw ConfigError("train: scst_lr, lr_scale, clip_norm and adam_eps must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: beta1 and beta2 must lie in [0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"warmup_steps", warmup_steps},
          {"batch_size", batch_size},
          {"grad_accum_steps", grad_accum_steps},
          {"xe_steps", xe_steps},
          {"scst_steps", scst_steps},
          {"scst_lr", scst_lr},
          {"scst_beam", scst_beam},
          {"seed", seed},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"lr_scale", lr_scale},
          {"clip_norm", clip_norm},
          {"validate_every", validate_every},
          {"patience", patience},
          {"val_items", val_items}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.grad_accum_steps = j.at("grad_accum_steps").get<std::size_t>();
  c.xe_steps = j.at("xe_steps").get<std::size_t>();
  c.scst_steps = j.at("scst_steps").get<std::size_t>();
  c.scst_lr = j.at("scst_lr").get<double>();
  c.scst_beam = j.at("scst_beam").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.lr_scale = j.at("lr_scale").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.validate_every = j.at("validate_every").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.val_items = j.at("val_items").get<std::size_t>();
  c.validate();
  return c;
}

// --- losses and schedules ---------------------------------------------------

Tensor xe_loss(const Tensor& logits, const TokenSequence& target) {
  if (target.size() < 2) throw std::invalid_argument("xe_loss: target needs at least two tokens");
  if (logits.dim() != 2 || logits.rows() + 1 != target.size())
    throw ShapeError("xe_loss: logits " + shape_to_string(logits.shape()) + " do not align with a target of " +
                     std::to_string(target.size()) + " tokens");
  std::vector<int> next(target.ids.begin() + 1, target.ids.end());
  bool any = false;
  for (auto& t : next) {
    if (t == kPadId) t = -1;
    else any = true;
  }
  if (!any) throw std::invalid_argument("xe_loss: every target position is padding");
  return cross_entropy(logits, next);
}

double lr_schedule(std::size_t step, std::size_t d, std::size_t warmup) {
  if (step == 0) throw std::invalid_argument("lr_schedule: step counts from 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

double clip_grad_norm(ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.items())
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalAbort("non-finite gradient norm");
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params.items())
      for (double& g : p.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

// --- Adam -------------------------------------------------------------------

Adam::Adam(const ParameterList& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& p : params.items()) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(ParameterList& params, double lr) {
  auto& items = params.items();
  if (m_.size() != items.size()) throw std::logic_error("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto w = items[i].tensor.mutable_data();
    auto g = items[i].tensor.mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

void Adam::restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw std::runtime_error("Adam: restored state has wrong shape");
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
      throw std::runtime_error("Adam: restored state has wrong shape");
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

// --- XE ---------------------------------------------------------------------

StepStats xe_train_step(Captioner& model, Adam& opt, std::span<const std::vector<Example>> micro_batches, double lr,
                        double clip_norm) {
  std::size_t total = 0;
  for (const auto& mb : micro_batches) total += mb.size();
  if (total == 0) throw std::invalid_argument("xe_train_step: empty batch");
  model.params().zero_grad();
  const double weight = 1.0 / static_cast<double>(total);
  StepStats stats;
  for (const auto& mb : micro_batches) {
    for (const auto& ex : mb) {
      const Tensor enc = model.encode_image(ex.item->features.grid);
      const MemoryEncoding mem = model.encode_memory(ex.memory);
      const std::span<const int> input(ex.target.ids.data(), ex.target.size() - 1);
      const Tensor loss = xe_loss(model.decoder_forward(input, enc, mem), ex.target);
      if (!std::isfinite(loss.item())) throw NumericalAbort("non-finite XE loss");
      stats.loss += loss.item() * weight;
      scale(loss, weight).backward();
    }
  }
  stats.grad_norm = clip_grad_norm(model.params(), clip_norm);
  opt.step(model.params(), lr);
  stats.lr = lr;
  stats.examples = total;
  return stats;
}

// --- SCST -------------------------------------------------------------------

std::vector<std::int64_t> quantized_advantages(std::span<const double> rewards) {
  if (rewards.empty()) return {};
  // B * R_i must fit in 63 bits.
  const double limit = std::ldexp(1.0, 62 - 40) / static_cast<double>(rewards.size());
  std::vector<std::int64_t> q;
  std::int64_t total = 0;
  for (double r : rewards) {
    if (!std::isfinite(r) || std::abs(r) >= limit) throw NumericalAbort("reward out of range");
    q.push_back(std::llround(r / kRewardQuantum));
    total += q.back();
  }
  const auto b = static_cast<std::int64_t>(rewards.size());
  for (auto& x : q) x = b * x - total;
  return q;
}

Tensor sequence_log_prob(const Captioner& model, const TokenSequence& seq, const Tensor& enc_out,
                         const MemoryEncoding& memory) {
  if (seq.size() < 2) throw std::invalid_argument("sequence_log_prob: needs BOS and one token");
  const std::span<const int> input(seq.ids.data(), seq.size() - 1);
  const Tensor lp = log_softmax(model.decoder_forward(input, enc_out, memory));
  std::vector<double> pick(lp.numel(), 0.0);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) pick[t * lp.cols() + static_cast<std::size_t>(seq.ids[t + 1])] = 1.0;
  return sum(mul(lp, Tensor::from(lp.shape(), std::move(pick))));
}

ScstStats scst_step(Captioner& model, Adam& opt, std::span<const ScstImage> batch, std::size_t beam, double lr,
                    double clip_norm, const RewardFn& reward) {
  if (batch.empty()) throw std::invalid_argument("scst_step: empty batch");
  if (beam < 2) throw std::invalid_argument("scst_step: beam must be at least 2");
  model.params().zero_grad();
  ScstStats stats;
  std::size_t rewarded = 0;
  bool any_gradient = false;
  const double per_image = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor enc = model.encode_image(batch[i].item->features.grid);
    const MemoryEncoding mem = model.encode_memory(batch[i].memory);
    const auto beams = model.beam_search_decode(enc, mem, beam);
    std::vector<double> r;
    for (const auto& b : beams) r.push_back(reward(b.sequence, i));
    for (double x : r) stats.mean_reward += x;
    rewarded += r.size();
    const auto adv = quantized_advantages(r);
    stats.advantage_sum += std::accumulate(adv.begin(), adv.end(), std::int64_t{0});
    if (std::all_of(adv.begin(), adv.end(), [](std::int64_t a) { return a == 0; })) {
      ++stats.zero_advantage_images;
      continue;
    }
    // (r_i - b) / B = A_i * quantum / B^2.
    const double nb = static_cast<double>(r.size());
    Tensor loss;
    for (std::size_t k = 0; k < beams.size(); ++k) {
      if (adv[k] == 0) continue;
      const double w = -static_cast<double>(adv[k]) * kRewardQuantum / (nb * nb) * per_image;
      const Tensor term = scale(sequence_log_prob(model, beams[k].sequence, enc, mem), w);
      loss = loss.defined() ? add(loss, term) : term;
    }
    if (!std::isfinite(loss.item())) throw NumericalAbort("non-finite SCST loss");
    loss.backward();
    any_gradient = true;
  }
  stats.mean_reward /= static_cast<double>(std::max<std::size_t>(rewarded, 1));
  if (any_gradient) {
    stats.grad_norm = clip_grad_norm(model.params(), clip_norm);
    opt.step(model.params(), lr);
  }
  return stats;
}

// --- memory -----------------------------------------------------------------

MemoryProvider::MemoryProvider(const Datastore* store, const HnswIndex* index, RetrievalConfig cfg,
                               const BpeTokenizer* tokenizer)
    : store_(store), index_(index), cfg_(std::move(cfg)), tokenizer_(tokenizer) {
  if (store_ && !tokenizer_) throw std::invalid_argument("MemoryProvider: a tokenizer is required");
}

const std::vector<TokenSequence>& MemoryProvider::fetch(const FeatureGrid& grid) {
  static const std::vector<TokenSequence> kNone;
  if (!store_) return kNone;
  auto it = cache_.find(grid.image_id);
  if (it != cache_.end()) return it->second;
  std::vector<TokenSequence> tokens;
  try {
    const auto result = retrieve_captions(grid, *store_, index_, cfg_, grid.image_id);
    if (observer) observer(grid.image_id, result);
    for (const auto& c : result.captions) tokens.push_back(tokenizer_->encode(c));
  } catch (const RetrievalError&) {
    ++failures_;
    tokens.clear();
  }
  return cache_.emplace(grid.image_id, std::move(tokens)).first->second;
}

// --- state ------------------------------------------------------------------

std::string TrainState::serialize() const {
  std::ostringstream rng_text;
  rng_text << rng;
  nlohmann::json order_flat = nlohmann::json::array();
  for (const auto& [a, b] : order) {
    order_flat.push_back(a);
    order_flat.push_back(b);
  }
  auto sizes = [](const Adam& a) {
    std::vector<std::size_t> s;
    for (const auto& m : a.first_moments()) s.push_back(m.size());
    return s;
  };
  const nlohmann::json header{{"xe_step", xe_step},
                              {"scst_step", scst_step},
                              {"rng", rng_text.str()},
                              {"order", order_flat},
                              {"cursor", cursor},
                              {"image_order", image_order},
                              {"image_cursor", image_cursor},
                              {"ema_loss", ema_loss},
                              {"ema_reward", ema_reward},
                              {"best_val", best_val},
                              {"bad_validations", bad_validations},
                              {"zero_advantage_images", zero_advantage_images},
                              {"xe_opt", {{"t", xe_opt.steps()}, {"sizes", sizes(xe_opt)}}},
                              {"scst_opt", {{"t", scst_opt.steps()}, {"sizes", sizes(scst_opt)}}}};
  const std::string h = header.dump();
  std::string out(kStateMagic, kStateMagicLen);
  put_u64(out, h.size());
  out += h;
  for (const Adam* a : {&xe_opt, &scst_opt}) {
    for (const auto& m : a->first_moments())
      for (double x : m) put_u64(out, std::bit_cast<std::uint64_t>(x));
    for (const auto& v : a->second_moments())
      for (double x : v) put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
  return out;
}

TrainState TrainState::deserialize(std::string_view bytes) {
  if (bytes.substr(0, kStateMagicLen) != std::string_view(kStateMagic, kStateMagicLen))
    throw std::runtime_error("train state: bad magic");
  const std::uint64_t hlen = get_u64(bytes, kStateMagicLen);
  std::size_t pos = kStateMagicLen + 8;
  if (pos + hlen > bytes.size()) throw std::runtime_error("train state: truncated header");
  const auto h = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  TrainState s;
  s.xe_step = h.at("xe_step").get<std::size_t>();
  s.scst_step = h.at("scst_step").get<std::size_t>();
  std::istringstream rng_text(h.at("rng").get<std::string>());
  rng_text >> s.rng;
  const auto flat = h.at("order").get<std::vector<std::uint32_t>>();
  for (std::size_t i = 0; i + 1 < flat.size(); i += 2) s.order.emplace_back(flat[i], flat[i + 1]);
  s.cursor = h.at("cursor").get<std::size_t>();
  s.image_order = h.at("image_order").get<std::vector<std::uint32_t>>();
  s.image_cursor = h.at("image_cursor").get<std::size_t>();
  s.ema_loss = h.at("ema_loss").get<double>();
  s.ema_reward = h.at("ema_reward").get<double>();
  s.best_val = h.at("best_val").get<double>();
  s.bad_validations = h.at("bad_validations").get<std::size_t>();
  s.zero_advantage_images = h.at("zero_advantage_images").get<std::size_t>();
  auto read_adam = [&](const nlohmann::json& j, Adam& a) {
    const auto sizes = j.at("sizes").get<std::vector<std::size_t>>();
    std::vector<std::vector<double>> m, v;
    for (auto* dst : {&m, &v})
      for (std::size_t n : sizes) {
        std::vector<double> x(n);
        for (auto& e : x) {
          e = std::bit_cast<double>(get_u64(bytes, pos));
          pos += 8;
        }
        dst->push_back(std::move(x));
      }
    ParameterList shape_only;
    for (std::size_t i = 0; i < sizes.size(); ++i)
      shape_only.add("p" + std::to_string(i), Tensor::zeros({sizes[i]}));
    a = Adam(shape_only, AdamConfig{});
    a.restore(j.at("t").get<std::uint64_t>(), std::move(m), std::move(v));
  };
  read_adam(h.at("xe_opt"), s.xe_opt);
  read_adam(h.at("scst_opt"), s.scst_opt);
  if (pos != bytes.size()) throw std::runtime_error("train state: trailing bytes");
  return s;
}

// --- evaluation -------------------------------------------------------------

MetricReport evaluate_model(const Captioner& model, std::span<const CorpusItem> items, MemoryProvider& memory,
                            const BpeTokenizer& tokenizer, std::size_t beam, std::vector<Prediction>* predictions) {
  NoGradGuard no_grad;
  std::map<std::string, std::string> preds;
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& item : items) {
    const auto& retrieved = memory.fetch(item.features);
    const Tensor enc = model.encode_image(item.features.grid);
    const MemoryEncoding mem = model.encode_memory(retrieved);
    TokenSequence seq = beam <= 1 ? model.greedy_decode(enc, mem) : model.beam_search_decode(enc, mem, beam)[0].sequence;
    std::string caption = tokenizer.decode(seq);
    if (predictions) {
      Prediction p{item.image_id(), caption, seq, {}};
      for (const auto& r : retrieved) p.retrieved.push_back(tokenizer.decode(r));
      predictions->push_back(std::move(p));
    }
    preds[item.image_id()] = std::move(caption);
    refs[item.image_id()] = item.captions;
  }
  return corpus_eval(preds, refs);
}

double validation_xe_loss(const Captioner& model, std::span<const CorpusItem> items, MemoryProvider& memory,
                          const BpeTokenizer& tokenizer) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& item : items) {
    const Tensor enc = model.encode_image(item.features.grid);
    const MemoryEncoding mem = model.encode_memory(memory.fetch(item.features));
    for (const auto& caption : item.captions) {
      const TokenSequence target = tokenizer.encode(caption);
      const std::span<const int> input(target.ids.data(), target.ids.size() - 1);
      total += xe_loss(model.decoder_forward(input, enc, mem), target).item();
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("validation_xe_loss: no captions");
  return total / static_cast<double>(n);
}

// --- trainer ----------------------------------------------------------------

Trainer::Trainer(ModelConfig model_cfg, TrainConfig cfg, TrainerInputs inputs)
    : cfg_(std::move(cfg)),
      in_(inputs),
      model_(std::move(model_cfg), cfg_.seed),
      memory_(model_.config().memory_mode == MemoryMode::kNone ? nullptr : inputs.store, inputs.index,
              inputs.retrieval, inputs.tokenizer) {
  cfg_.validate();
  if (!in_.train || !in_.tokenizer) throw std::invalid_argument("Trainer: train corpus and tokenizer are required");
  if (in_.train->items.empty()) throw std::invalid_argument("Trainer: empty train corpus");
  if (in_.tokenizer->max_len() > model_.config().max_len)
    throw ConfigError("Trainer: tokenizer max_len exceeds the model's max_len");
  if (in_.tokenizer->vocab_size() > model_.config().vocab_size)
    throw ConfigError("Trainer: tokenizer vocabulary (" + std::to_string(in_.tokenizer->vocab_size()) +
                      ") exceeds the model's vocab_size (" + std::to_string(model_.config().vocab_size) + ")");
  if (model_.config().memory_mode != MemoryMode::kNone && !in_.store)
    throw ConfigError("Trainer: a memory model needs a datastore");

  const AdamConfig adam{cfg_.beta1, cfg_.beta2, cfg_.adam_eps};
  state_.xe_opt = Adam(model_.params(), adam);
  state_.scst_opt = Adam(model_.params(), adam);
  state_.rng = derived_rng(cfg_.seed, 0x7261696eULL);

  std::vector<std::vector<std::string>> ref_sets;
  for (const auto& item : in_.train->items) {
    std::vector<TokenSequence> t;
    for (const auto& c : item.captions) t.push_back(in_.tokenizer->encode(c));
    targets_.push_back(std::move(t));
    ref_sets.push_back(item.captions);
  }
  train_idf_ = IdfTable::build(ref_sets);
  scorers_.resize(in_.train->items.size());
}

void Trainer::reshuffle_examples() {
  state_.order.clear();
  for (std::uint32_t i = 0; i < targets_.size(); ++i)
    for (std::uint32_t c = 0; c < targets_[i].size(); ++c) state_.order.emplace_back(i, c);
  shuffle(std::span(state_.order), state_.rng);
  state_.cursor = 0;
}

void Trainer::reshuffle_images() {
  state_.image_order.resize(targets_.size());
  std::iota(state_.image_order.begin(), state_.image_order.end(), 0u);
  shuffle(std::span(state_.image_order), state_.rng);
  state_.image_cursor = 0;
}

const std::vector<TokenSequence>& Trainer::memory_for(const CorpusItem& item) {
  const auto& mem = memory_.fetch(item.features);
  if (mem.empty() && model_.config().memory_mode != MemoryMode::kNone) ++empty_memory_examples_;
  return mem;
}

StepStats Trainer::xe_step() {
  std::vector<std::vector<Example>> micro(cfg_.grad_accum_steps);
  for (auto& mb : micro) {
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      if (state_.cursor >= state_.order.size()) reshuffle_examples();
      const auto [i, c] = state_.order[state_.cursor++];
      const auto& item = in_.train->items[i];
      mb.push_back({&item, targets_[i][c], memory_for(item)});
    }
  }
  const std::size_t step = state_.xe_step + 1;
  const double lr = cfg_.lr_scale * lr_schedule(step, model_.config().d, cfg_.warmup_steps);
  const StepStats stats = xe_train_step(model_, state_.xe_opt, micro, lr, cfg_.clip_norm);
  state_.xe_step = step;
  state_.ema_loss = step == 1 ? stats.loss : 0.98 * state_.ema_loss + 0.02 * stats.loss;
  return stats;
}

ScstStats Trainer::scst_step() {
  std::vector<ScstImage> batch;
  std::vector<std::size_t> index;
  for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
    if (state_.image_cursor >= state_.image_order.size()) reshuffle_images();
    const std::size_t i = state_.image_order[state_.image_cursor++];
    const auto& item = in_.train->items[i];
    batch.push_back({&item, memory_for(item)});
    index.push_back(i);
  }
  auto reward = [&](const TokenSequence& seq, std::size_t k) {
    auto& scorer = scorers_[index[k]];
    if (!scorer) scorer.emplace(in_.train->items[index[k]].captions, train_idf_);
    return scorer->score(in_.tokenizer->decode(seq));
  };
  const ScstStats stats =
      ratcap::scst_step(model_, state_.scst_opt, batch, cfg_.scst_beam, cfg_.scst_lr, cfg_.clip_norm, reward);
  ++state_.scst_step;
  state_.zero_advantage_images += stats.zero_advantage_images;
  state_.ema_reward =
      state_.scst_step == 1 ? stats.mean_reward : 0.98 * state_.ema_reward + 0.02 * stats.mean_reward;
  return stats;
}

MetricReport Trainer::validate() {
  if (!in_.val || in_.val->items.empty()) throw std::invalid_argument("Trainer: no validation split");
  std::span<const CorpusItem> items(in_.val->items);
  if (cfg_.val_items && cfg_.val_items < items.size()) items = items.first(cfg_.val_items);
  return evaluate_model(model_, items, memory_, *in_.tokenizer);
}

double Trainer::validation_loss() {
  if (!in_.val || in_.val->items.empty()) throw std::invalid_argument("Trainer: no validation split");
  std::span<const CorpusItem> items(in_.val->items);
  if (cfg_.val_items && cfg_.val_items < items.size()) items = items.first(cfg_.val_items);
  return validation_xe_loss(model_, items, memory_, *in_.tokenizer);
}

void Trainer::save(const std::filesystem::path& checkpoint) const {
  model_.save(checkpoint);
  std::ofstream out(checkpoint.string() + ".state", std::ios::binary);
  const auto bytes = state_.serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + checkpoint.string() + ".state");
}

void Trainer::resume(const std::filesystem::path& checkpoint) {
  const Captioner loaded = Captioner::load(checkpoint);
  if (loaded.config().to_json() != model_.config().to_json())
    throw ConfigError("resume: checkpoint architecture differs from the configured model");
  model_.copy_parameters_from(loaded);
  std::ifstream in(checkpoint.string() + ".state", std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + checkpoint.string() + ".state");
  std::ostringstream ss;
  ss << in.rdbuf();
  TrainState s = TrainState::deserialize(ss.str());
  // Keep the configured optimizer hyperparameters; take the moments.
  state_.xe_opt.restore(s.xe_opt.steps(), s.xe_opt.first_moments(), s.xe_opt.second_moments());
  state_.scst_opt.restore(s.scst_opt.steps(), s.scst_opt.first_moments(), s.scst_opt.second_moments());
  s.xe_opt = state_.xe_opt;
  s.scst_opt = state_.scst_opt;
  state_ = std::move(s);
}

// --- pipeline ---------------------------------------------------------------

PipelineResult train_pipeline(const ModelConfig& model_cfg, const TrainConfig& cfg, const TrainerInputs& inputs,
                              const PipelineOptions& options) {
  Trainer trainer(model_cfg, cfg, inputs);
  PipelineResult result;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t global_step = 0;

  auto emit = [&](nlohmann::json rec) {
    if (!options.log) return;
    rec["alpha"] = trainer.model().gate_alphas();
    if (options.log_wallclock)
      rec["wallclock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    *options.log << rec.dump() << "\n";
  };
  auto run_validation = [&](const char* stage) {
    const MetricReport r = trainer.validate();
    auto& st = trainer.state();
    const bool improved = r.cider_d > st.best_val;
    if (improved) {
      st.best_val = r.cider_d;
      st.bad_validations = 0;
      result.best = deep_copy(trainer.model());
      if (options.checkpoint) trainer.save(*options.checkpoint);
    } else {
      ++st.bad_validations;
    }
    emit({{"step", global_step},
          {"stage", "val"},
          {"after", stage},
          {"bleu4", r.bleu[3]},
          {"rouge_l", r.rouge_l},
          {"cider_d", r.cider_d},
          {"best", improved}});
    return r;
  };

  bool validated_last = false;
  MetricReport last_report;
  try {
    trainer.state().bad_validations = 0;
    for (std::size_t s = 1; s <= cfg.xe_steps; ++s) {
      const StepStats st = trainer.xe_step();
      ++global_step;
      emit({{"step", global_step}, {"stage", "xe"}, {"loss", st.loss}, {"lr", st.lr}, {"grad_norm", st.grad_norm}});
      validated_last = false;
      if (s % cfg.validate_every == 0) {
        last_report = run_validation("xe");
        validated_last = true;
        if (trainer.state().bad_validations >= cfg.patience) break;
      }
    }
    result.xe_steps = trainer.state().xe_step;
    result.xe_val = validated_last ? last_report : run_validation("xe");
    result.final_val = result.xe_val;
    result.xe_val_loss = trainer.validation_loss();
    emit({{"step", global_step}, {"stage", "val_loss"}, {"after", "xe"}, {"loss", result.xe_val_loss}});

    trainer.state().bad_validations = 0;
    validated_last = true;
    for (std::size_t s = 1; s <= cfg.scst_steps; ++s) {
      const ScstStats st = trainer.scst_step();
      ++global_step;
      emit({{"step", global_step},
            {"stage", "scst"},
            {"reward", st.mean_reward},
            {"lr", cfg.scst_lr},
            {"grad_norm", st.grad_norm},
            {"zero_advantage", st.zero_advantage_images}});
      validated_last = false;
      if (s % cfg.validate_every == 0) {
        result.final_val = run_validation("scst");
        validated_last = true;
        if (trainer.state().bad_validations >= cfg.patience) break;
      }
    }
    result.scst_steps = trainer.state().scst_step;
    if (!validated_last) result.final_val = run_validation("scst");
  } catch (const NumericalAbort& e) {
    result.aborted = true;
    result.abort_reason = e.what();
    emit({{"step", global_step}, {"stage", "abort"}, {"reason", e.what()}});
  }
  result.best_val_cider = trainer.state().best_val;
  result.last = deep_copy(trainer.model());
  if (!result.best) result.best = deep_copy(trainer.model());
  return result;
}

}  // namespace ratcap
