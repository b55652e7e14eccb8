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

#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "ratcap/model.hpp"

namespace ratcap {
namespace {

using testing::grad_check;
using testing::random_tensor;

ModelConfig tiny_config(MemoryMode mode = MemoryMode::kGated) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.mem_layers = 1;
  c.ffn_mult = 2;
  c.vocab_size = 12;
  c.feat_dim = 5;
  c.max_len = 10;
  c.memory_mode = mode;
  return c;
}

Tensor grid(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({rows, cols}, rng, false);
}

std::vector<TokenSequence> captions() {
  return {TokenSequence{{kBosId, 5, 6, 7, kEosId}}, TokenSequence{{kBosId, 8, 3, 4, 9, 10, kEosId}}};
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

TEST(ModelConfig, ValidationAndJson) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dec_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(MemoryMode::kSequential);
  c.shared_gate = true;
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  EXPECT_THROW(parse_memory_mode("both"), ConfigError);
}

TEST(Encoder, ShapesAndDimensionCheck) {
  Captioner m(tiny_config(), 1);
  for (std::size_t p : {1, 4, 9}) EXPECT_EQ(m.encode_image(grid(p, 5, p)).shape(), (Shape{p, 8}));
  EXPECT_THROW(m.encode_image(grid(3, 4, 1)), ShapeError);
}

TEST(Encoder, PermutationEquivariant) {
  Captioner m(tiny_config(), 2);
  const Tensor g = grid(6, 5, 3);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> permuted;
  for (auto r : perm)
    for (std::size_t c = 0; c < 5; ++c) permuted.push_back(g.at(r, c));
  const Tensor out = m.encode_image(g);
  const Tensor out_p = m.encode_image(Tensor::matrix(6, 5, permuted));
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out_p.at(i, c), out.at(perm[i], c), 1e-12);
}

TEST(Encoder, GradientCheckTwoLayers) {
  Captioner m(tiny_config(), 4);
  const Tensor g = grid(3, 5, 5);
  std::mt19937_64 rng(6);
  const Tensor target = random_tensor({3, 8}, rng, false);
  std::vector<Tensor> inputs;
  for (const auto& p : m.params().items())
    if (p.name.rfind("encoder.", 0) == 0) inputs.push_back(p.tensor);
  ASSERT_GT(inputs.size(), 20u);
  const auto r = grad_check(
      [&] {
        const Tensor out = m.encode_image(g);
        return sum(mul(out, target));
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(MemoryEncoder, ShapesPerCaption) {
  Captioner m(tiny_config(), 7);
  std::vector<TokenSequence> caps{TokenSequence{{kBosId, 3, 4, 5, 6, 7, kEosId}},
                                  TokenSequence{{kBosId, 3, 4, 5, 6, 7, 8, 9, kEosId}}};
  const auto mem = m.encode_memory(caps);
  ASSERT_EQ(mem.captions.size(), 2u);
  EXPECT_EQ(mem.captions[0].shape(), (Shape{7, 8}));
  EXPECT_EQ(mem.captions[1].shape(), (Shape{9, 8}));
  EXPECT_EQ(mem.tokens(), 16u);
  EXPECT_EQ(mem.offsets, (std::vector<std::size_t>{0, 7}));
  EXPECT_TRUE(m.encode_memory({}).empty());
}

TEST(MemoryEncoder, CaptionsEncodedIndependently) {
  Captioner m(tiny_config(), 8);
  const TokenSequence a{{kBosId, 5, 6, 7, kEosId}};
  const auto alone = m.encode_memory(std::vector<TokenSequence>{a});
  for (const auto& other : {TokenSequence{{kBosId, 9, kEosId}}, TokenSequence{{kBosId, 3, 3, 3, 3, 4, kEosId}}}) {
    const auto both = m.encode_memory(std::vector<TokenSequence>{other, a});
    EXPECT_EQ(values(both.captions[1]), values(alone.captions[0]));
  }
  const auto twins = m.encode_memory(std::vector<TokenSequence>{a, a});
  EXPECT_EQ(values(twins.captions[0]), values(twins.captions[1]));
}

TEST(MemoryEncoder, NoneModeHasNoMemory) {
  Captioner m(tiny_config(MemoryMode::kNone), 9);
  EXPECT_TRUE(m.encode_memory(captions()).empty());
  for (const auto& p : m.params().items()) {
    EXPECT_EQ(p.name.find("memory"), std::string::npos) << p.name;
    EXPECT_EQ(p.name.find("knn"), std::string::npos) << p.name;
    EXPECT_EQ(p.name.find("gate"), std::string::npos) << p.name;
  }
}

TEST(KnnAttention, GateStartsAtHalf) {
  Captioner m(tiny_config(), 10);
  EXPECT_EQ(m.gate_count(), 2u);
  for (double a : m.gate_alphas()) EXPECT_EQ(a, 0.5);
  auto c = tiny_config();
  c.shared_gate = true;
  Captioner shared(c, 10);
  EXPECT_EQ(shared.gate_count(), 1u);
  shared.set_gate_logit(1, 3.0);
  EXPECT_EQ(shared.gate_alpha(0), shared.gate_alpha(1));
}

TEST(KnnAttention, GateSaturationReproducesBranches) {
  Captioner m(tiny_config(), 11);
  const auto mem = m.encode_memory(captions());
  std::mt19937_64 rng(12);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const Tensor x = random_tensor({6, 8}, rng, false);
    m.set_gate_logit(layer, 20.0);
    auto hi = m.knn_attention(layer, x, mem);
    EXPECT_LE(max_abs_diff(hi.mixed, hi.local), 1e-5);
    m.set_gate_logit(layer, -20.0);
    auto lo = m.knn_attention(layer, x, mem);
    EXPECT_LE(max_abs_diff(lo.mixed, lo.memory), 1e-5);
    // Both branches are non-trivial, so the checks above are not vacuous.
    EXPECT_GT(max_abs_diff(lo.local, lo.memory), 1e-3);
  }
}

TEST(KnnAttention, ParameterAudit) {
  Captioner m(tiny_config(), 13);
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const auto a = m.audit_knn_layer(layer);
    EXPECT_EQ(a.query, 1u);
    EXPECT_EQ(a.key, 2u);
    EXPECT_EQ(a.value, 2u);
    EXPECT_EQ(a.output, 2u);
    EXPECT_EQ(a.gate, 1u);
  }
}

TEST(KnnAttention, SharedQueryDrivesBothBranches) {
  Captioner m(tiny_config(), 14);
  const auto mem = m.encode_memory(captions());
  std::mt19937_64 rng(15);
  const Tensor x = random_tensor({4, 8}, rng, false);
  const auto before = m.knn_attention(0, x, mem);
  for (auto& p : m.params().items())
    if (p.name == "decoder.layer0.knn.query.w") std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  const auto after = m.knn_attention(0, x, mem);
  EXPECT_GT(max_abs_diff(before.local, after.local), 1e-6);
  EXPECT_GT(max_abs_diff(before.memory, after.memory), 1e-6);
}

TEST(KnnAttention, EmptyMemoryFallsBackToLocal) {
  Captioner m(tiny_config(), 16);
  std::mt19937_64 rng(17);
  const Tensor x = random_tensor({3, 8}, rng, false);
  const auto before = m.empty_memory_events();
  const auto parts = m.knn_attention(0, x, MemoryEncoding{});
  EXPECT_EQ(values(parts.mixed), values(parts.local));
  EXPECT_EQ(m.empty_memory_events(), before + 1);
}

class DecoderModes : public ::testing::TestWithParam<MemoryMode> {};

TEST_P(DecoderModes, LogitShape) {
  Captioner m(tiny_config(GetParam()), 18);
  const auto enc = m.encode_image(grid(4, 5, 19));
  const auto mem = m.encode_memory(captions());
  const std::vector<int> toks{kBosId, 4, 5, 6};
  EXPECT_EQ(m.decoder_forward(toks, enc, mem).shape(), (Shape{4, 12}));
  const std::vector<int> no_bos{4, 5};
  EXPECT_THROW(m.decoder_forward(no_bos, enc, mem), std::invalid_argument);
  const std::vector<int> too_long(11, kBosId);
  EXPECT_THROW(m.decoder_forward(too_long, enc, mem), ShapeError);
}

TEST_P(DecoderModes, CausalMaskBitwise) {
  Captioner m(tiny_config(GetParam()), 20);
  const auto enc = m.encode_image(grid(4, 5, 21));
  const auto mem = m.encode_memory(captions());
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> tok(3, 11);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> a{kBosId};
    for (int i = 0; i < 7; ++i) a.push_back(tok(rng));
    const std::size_t t = 1 + static_cast<std::size_t>(trial);
    std::vector<int> b = a;
    for (std::size_t i = t; i < b.size(); ++i) b[i] = tok(rng);
    b[t] = a[t] == 3 ? 4 : 3;
    const Tensor la = m.decoder_forward(a, enc, mem), lb = m.decoder_forward(b, enc, mem);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(la.at(r, c), lb.at(r, c)) << "row " << r;
    bool changed = false;
    for (std::size_t c = 0; c < 12; ++c) changed |= la.at(t, c) != lb.at(t, c);
    EXPECT_TRUE(changed);
  }
}

TEST_P(DecoderModes, IncrementalMatchesFullForward) {
  Captioner m(tiny_config(GetParam()), 23);
  const auto enc = m.encode_image(grid(5, 5, 24));
  for (const auto& mem : {m.encode_memory(captions()), MemoryEncoding{}}) {
    const std::vector<int> toks{kBosId, 7, 3, 9, 9, 11, 4, 5, 6, 8};
    const Tensor full = log_softmax(m.decoder_forward(toks, enc, mem));
    auto st = m.start(enc, mem);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      const auto lp = m.step(st, toks[t]);
      EXPECT_EQ(st.length(), t + 1);
      for (std::size_t c = 0; c < 12; ++c) {
        if (c == kPadId || c == kBosId) {
          EXPECT_EQ(lp[c], -std::numeric_limits<double>::infinity());
          continue;
        }
        EXPECT_NEAR(lp[c], full.at(t, c), 1e-9) << "step " << t << " token " << c;
      }
    }
    EXPECT_THROW(m.step(st, 3), ShapeError);
  }
}

TEST_P(DecoderModes, BeamOneEqualsGreedy) {
  for (std::uint64_t seed : {25, 26, 27}) {
    Captioner m(tiny_config(GetParam()), seed);
    const auto enc = m.encode_image(grid(4, 5, seed));
    const auto mem = m.encode_memory(captions());
    const auto greedy = m.greedy_decode(enc, mem);
    const auto beams = m.beam_search_decode(enc, mem, 1);
    ASSERT_EQ(beams.size(), 1u);
    EXPECT_EQ(beams[0].sequence, greedy);
    EXPECT_EQ(m.greedy_decode(enc, mem), greedy);
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, DecoderModes,
                         ::testing::Values(MemoryMode::kGated, MemoryMode::kSequential, MemoryMode::kNone),
                         [](const auto& info) { return to_string(info.param); });

TEST(Decoding, BeamTerminationAndOrder) {
  Captioner m(tiny_config(), 28);
  const auto enc = m.encode_image(grid(4, 5, 29));
  const auto mem = m.encode_memory(captions());
  const auto beams = m.beam_search_decode(enc, mem, 4);
  ASSERT_EQ(beams.size(), 4u);
  for (std::size_t i = 0; i < beams.size(); ++i) {
    const auto& ids = beams[i].sequence.ids;
    EXPECT_EQ(ids.front(), kBosId);
    EXPECT_TRUE(ids.back() == kEosId || ids.size() == 10u);
    EXPECT_NEAR(beams[i].score, beams[i].log_prob / static_cast<double>(ids.size() - 1), 1e-15);
    if (i > 0) EXPECT_GE(beams[i - 1].score, beams[i].score);
  }
  EXPECT_THROW(m.beam_search_decode(enc, mem, 0), std::invalid_argument);
}

TEST(Decoding, EosRiggedModelEmitsEmptyCaption) {
  Captioner m(tiny_config(), 30);
  for (auto& p : m.params().items())
    if (p.name == "output.b") p.tensor.mutable_data()[kEosId] = 1e3;
  const auto enc = m.encode_image(grid(4, 5, 31));
  const auto seq = m.greedy_decode(enc, m.encode_memory(captions()));
  EXPECT_EQ(seq.ids, (std::vector<int>{kBosId, kEosId}));
}

// Rigged three-token task: 0 = EOS, 1 and 2 are words; BOS (3) is never
// produced. The distribution depends on the previous token only, and EOS
// may not directly follow BOS.
struct RiggedState {
  int last = 3;
};

std::vector<double> rigged_log_probs(int last) {
  static const std::array<std::array<double, 3>, 4> table{{
      {1.00, 0.00, 0.00},  // after EOS (unused)
      {0.97, 0.02, 0.01},  // after word 1
      {0.90, 0.07, 0.03},  // after word 2
      {0.00, 0.70, 0.30},  // after BOS
  }};
  std::vector<double> lp;
  for (double p : table[static_cast<std::size_t>(last)]) lp.push_back(std::log(p));
  return lp;
}

struct Scored {
  std::vector<int> tokens;
  double log_prob;
  double score;
};

// Every complete sequence: ends in EOS, or reaches four generated tokens.
std::vector<Scored> enumerate_rigged(std::size_t max_generated) {
  std::vector<Scored> out;
  std::vector<Scored> frontier{{{3}, 0.0, 0.0}};
  for (std::size_t len = 1; len <= max_generated; ++len) {
    std::vector<Scored> next;
    for (const auto& s : frontier) {
      const auto lp = rigged_log_probs(s.tokens.back());
      for (int t = 0; t < 3; ++t) {
        if (!std::isfinite(lp[t])) continue;
        Scored e{s.tokens, s.log_prob + lp[t], 0.0};
        e.tokens.push_back(t);
        e.score = e.log_prob / static_cast<double>(len);
        if (t == 0 || len == max_generated) out.push_back(e);
        else next.push_back(e);
      }
    }
    frontier = std::move(next);
  }
  std::sort(out.begin(), out.end(), [](const Scored& a, const Scored& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  return out;
}

TEST(BeamSearch, MatchesExhaustiveEnumerationOnRiggedTask) {
  const auto all = enumerate_rigged(4);
  ASSERT_EQ(all.size(), 2u + 4u + 8u + 16u);
  auto step = [](RiggedState& s, int token) {
    s.last = token;
    return rigged_log_probs(token);
  };
  for (std::size_t beam = 1; beam <= all.size(); ++beam) {
    const auto got = beam_search(RiggedState{}, beam, 5, 3, 0, step);
    ASSERT_EQ(got.size(), beam);
    for (std::size_t i = 0; i < beam; ++i) {
      EXPECT_EQ(got[i].tokens, all[i].tokens) << "beam " << beam << " rank " << i;
      EXPECT_NEAR(got[i].score, all[i].score, 1e-15);
    }
  }
}

TEST(BeamSearch, WideBeamReturnsEverySequence) {
  const auto all = enumerate_rigged(4);
  auto step = [](RiggedState& s, int token) {
    s.last = token;
    return rigged_log_probs(token);
  };
  const auto got = beam_search(RiggedState{}, all.size(), 5, 3, 0, step);
  ASSERT_EQ(got.size(), all.size());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(got[i].tokens, all[i].tokens);
}

TEST(EndToEnd, GradientCheckOneLayer) {
  auto c = tiny_config();
  c.d = 4;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.vocab_size = 7;
  c.feat_dim = 3;
  c.max_len = 6;
  Captioner m(c, 32);
  m.set_gate_logit(0, 0.3);
  const Tensor g = grid(3, 3, 33);
  const std::vector<TokenSequence> caps{TokenSequence{{kBosId, 3, 4, kEosId}}, TokenSequence{{kBosId, 5, kEosId}}};
  const std::vector<int> input{kBosId, 6, 3, 5};
  const std::vector<int> target{6, 3, 5, kEosId};
  std::vector<Tensor> inputs;
  for (const auto& p : m.params().items()) inputs.push_back(p.tensor);
  const auto r = grad_check(
      [&] {
        const auto enc = m.encode_image(g);
        const auto mem = m.encode_memory(caps);
        return cross_entropy(m.decoder_forward(input, enc, mem), target);
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 300u);
}

TEST(Checkpoint, RoundtripBitExact) {
  auto c = tiny_config();
  c.shared_gate = true;
  Captioner m(c, 34);
  m.set_gate_logit(0, -1.25);
  const auto bytes = m.serialize();
  EXPECT_EQ(bytes.substr(0, 7), "RATCAP1");
  const auto back = Captioner::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.checksum(), m.checksum());
  EXPECT_EQ(back.config().to_json(), c.to_json());

  const auto path = std::filesystem::temp_directory_path() / "ratcap_model_test.ckpt";
  m.save(path);
  EXPECT_EQ(Captioner::load(path).serialize(), bytes);
  std::filesystem::remove(path);

  EXPECT_THROW(Captioner::deserialize("RATCAPX"), std::runtime_error);
  EXPECT_THROW(Captioner::deserialize(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
}

TEST(Checkpoint, SameSeedSameBytes) {
  EXPECT_EQ(Captioner(tiny_config(), 35).serialize(), Captioner(tiny_config(), 35).serialize());
  EXPECT_NE(Captioner(tiny_config(), 35).checksum(), Captioner(tiny_config(), 36).checksum());
}

TEST(Checkpoint, CopyParameters) {
  Captioner a(tiny_config(), 37), b(tiny_config(), 38);
  b.copy_parameters_from(a);
  EXPECT_EQ(a.serialize(), b.serialize());
  Captioner other(tiny_config(MemoryMode::kNone), 38);
  EXPECT_THROW(other.copy_parameters_from(a), std::invalid_argument);
}

TEST(Sinusoid, KnownValues) {
  const auto r0 = sinusoid(0, 4);
  EXPECT_EQ(r0, (std::vector<double>{0.0, 1.0, 0.0, 1.0}));
  const auto r3 = sinusoid(3, 4);
  EXPECT_DOUBLE_EQ(r3[0], std::sin(3.0));
  EXPECT_DOUBLE_EQ(r3[1], std::cos(3.0));
  EXPECT_DOUBLE_EQ(r3[2], std::sin(3.0 / 100.0));
  EXPECT_DOUBLE_EQ(r3[3], std::cos(3.0 / 100.0));
}

}  // namespace
}  // namespace ratcap
