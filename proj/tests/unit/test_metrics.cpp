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
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "metric_cases.hpp"
#include "ratcap/metrics.hpp"
#include "ratcap/tokenizer.hpp"

namespace ratcap {
namespace {

using testing::kMetricCases;
using testing::kMetricReference;

std::vector<std::vector<std::string>> case_refs() {
  std::vector<std::vector<std::string>> out;
  for (const auto& c : kMetricCases) out.push_back(c.references);
  return out;
}

TEST(Bleu, MatchesReferenceImplementation) {
  for (std::size_t i = 0; i < kMetricCases.size(); ++i) {
    auto b = bleu(kMetricCases[i].candidate, kMetricCases[i].references);
    for (int n = 0; n < 4; ++n) EXPECT_NEAR(b[n], kMetricReference[i][n], 1e-4) << "case " << i << " n=" << n + 1;
  }
}

TEST(Bleu, IdentityIsOne) {
  const std::vector<std::string> refs{"a dog runs on the beach", "something else entirely"};
  for (double v : bleu("a dog runs on the beach", refs)) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Bleu, ClippedRepetitionByHand) {
  // One clipped "the" out of four unigrams; candidate longer than the
  // reference, so no brevity penalty.
  const std::vector<std::string> refs{"the cat"};
  auto b = bleu("the the the the", refs);
  EXPECT_DOUBLE_EQ(b[0], 0.25);
  EXPECT_DOUBLE_EQ(b[1], 0.0);
}

TEST(Bleu, BrevityPenaltyByHand) {
  // 2-word candidate, closest reference 4 words: BP = exp(1 - 4/2).
  const std::vector<std::string> refs{"the cat sat down"};
  auto b = bleu("the cat", refs);
  EXPECT_NEAR(b[0], std::exp(-1.0), 1e-15);
  EXPECT_NEAR(b[1], std::exp(-1.0), 1e-15);
  EXPECT_EQ(b[2], 0.0);
}

TEST(Bleu, EmptyCandidateIsZero) {
  const std::vector<std::string> refs{"a cat"};
  for (double v : bleu("", refs)) EXPECT_EQ(v, 0.0);
}

TEST(RougeL, MatchesReferenceImplementation) {
  for (std::size_t i = 0; i < kMetricCases.size(); ++i)
    EXPECT_NEAR(rouge_l(kMetricCases[i].candidate, kMetricCases[i].references), kMetricReference[i][4], 1e-9)
        << "case " << i;
}

// Exhaustive LCS: the longest common subsequence found by enumerating all
// subsequences of the shorter sentence.
std::size_t brute_force_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& l = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    std::size_t pos = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (pos < l.size() && l[pos] != s[i]) ++pos;
      if (pos == l.size()) ok = false;
      else {
        ++pos;
        ++len;
      }
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

TEST(RougeL, LcsMatchesEnumerationOracle) {
  std::mt19937_64 rng(3);
  const std::vector<std::string> vocab{"a", "b", "c", "d"};
  std::uniform_int_distribution<std::size_t> len(0, 10), pick(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> x, y;
    for (auto n = len(rng); n > 0; --n) x.push_back(vocab[pick(rng)]);
    for (auto n = len(rng); n > 0; --n) y.push_back(vocab[pick(rng)]);
    EXPECT_EQ(lcs_length(x, y), brute_force_lcs(x, y));
  }
}

TEST(RougeL, FixedPairsMatchLcsFormula) {
  for (const auto& c : kMetricCases) {
    auto cand = split_words(normalize_text(c.candidate));
    double p = 0, r = 0;
    for (const auto& ref : c.references) {
      auto rw = split_words(normalize_text(ref));
      const double l = static_cast<double>(brute_force_lcs(cand, rw));
      p = std::max(p, l / cand.size());
      r = std::max(r, l / rw.size());
    }
    const double expected = (1 + 1.44) * p * r / (r + 1.44 * p);
    EXPECT_EQ(rouge_l(c.candidate, c.references), expected);
  }
}

TEST(RougeL, IdentityAndDisjoint) {
  const std::vector<std::string> refs{"a small white dog"};
  EXPECT_DOUBLE_EQ(rouge_l("a small white dog", refs), 1.0);
  EXPECT_EQ(rouge_l("two green trucks", refs), 0.0);
  EXPECT_EQ(rouge_l("", refs), 0.0);
}

TEST(CiderD, MatchesReferenceImplementation) {
  auto refs = case_refs();
  const IdfTable idf = IdfTable::build(refs);
  for (std::size_t i = 0; i < kMetricCases.size(); ++i)
    EXPECT_NEAR(cider_d(kMetricCases[i].candidate, kMetricCases[i].references, idf), kMetricReference[i][5], 1e-4)
        << "case " << i;
}

TEST(CiderD, SoleReferenceIdentityScoresTen) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& c : kMetricCases) corpus.push_back({c.candidate});
  const IdfTable idf = IdfTable::build(corpus);
  for (const auto& c : kMetricCases) {
    const std::vector<std::string> refs{c.candidate};
    EXPECT_NEAR(cider_d(c.candidate, refs, idf), 10.0, 1e-12);
  }
}

TEST(CiderD, SingleDocumentCorpusIsDegenerate) {
  const std::vector<std::vector<std::string>> corpus{{"a cat on a mat", "a kitten on a rug"}};
  const IdfTable idf = IdfTable::build(corpus);
  EXPECT_TRUE(idf.degenerate());
  EXPECT_EQ(cider_d("a cat on a mat", corpus[0], idf), 0.0);
}

TEST(CiderD, IdfIsOrderFree) {
  auto refs = case_refs();
  auto shuffled = refs;
  std::mt19937_64 rng(8);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  for (auto& r : shuffled) std::shuffle(r.begin(), r.end(), rng);
  const IdfTable a = IdfTable::build(refs), b = IdfTable::build(shuffled);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto perm = kMetricCases[i].references;
    std::reverse(perm.begin(), perm.end());
    const double x = cider_d(kMetricCases[i].candidate, kMetricCases[i].references, a);
    EXPECT_NEAR(x, cider_d(kMetricCases[i].candidate, perm, b), 1e-12);
  }
}

TEST(Metrics, InvariantToReferenceOrder) {
  for (const auto& c : kMetricCases) {
    auto perm = c.references;
    std::reverse(perm.begin(), perm.end());
    auto b1 = bleu(c.candidate, c.references), b2 = bleu(c.candidate, perm);
    for (int n = 0; n < 4; ++n) EXPECT_EQ(b1[n], b2[n]);
    EXPECT_EQ(rouge_l(c.candidate, c.references), rouge_l(c.candidate, perm));
  }
}

TEST(CorpusEval, IdentityPredictionsMaximize) {
  std::map<std::string, std::string> preds;
  std::map<std::string, std::vector<std::string>> refs;
  for (std::size_t i = 0; i < kMetricCases.size(); ++i) {
    const std::string id = "img" + std::to_string(i);
    refs[id] = {kMetricCases[i].candidate};
    preds[id] = kMetricCases[i].candidate;
  }
  auto report = corpus_eval(preds, refs);
  EXPECT_DOUBLE_EQ(report.bleu[3], 1.0);
  EXPECT_NEAR(report.cider_d, 10.0, 1e-12);
  EXPECT_DOUBLE_EQ(report.rouge_l, 1.0);
}

TEST(CorpusEval, EmptyAndMismatchedInputsAreErrors) {
  std::map<std::string, std::string> preds;
  std::map<std::string, std::vector<std::string>> refs{{"a", {"x y"}}};
  EXPECT_THROW(corpus_eval(preds, refs), MetricInputError);
  preds["b"] = "x y";
  try {
    corpus_eval(preds, refs);
    FAIL();
  } catch (const MetricInputError& e) {
    EXPECT_EQ(e.missing_ids, (std::vector<std::string>{"b", "a"}));
  }
}

TEST(CorpusEval, MatchesPerItemRecomputation) {
  std::map<std::string, std::string> preds;
  std::map<std::string, std::vector<std::string>> refs;
  for (std::size_t i = 0; i < kMetricCases.size(); ++i) {
    const std::string id = "img" + std::to_string(100 + i);
    preds[id] = kMetricCases[i].candidate;
    refs[id] = kMetricCases[i].references;
  }
  auto report = corpus_eval(preds, refs);

  // From-scratch recomputation: corpus BLEU from summed clipped counts.
  std::array<double, 4> correct{}, guess{};
  double clen = 0, rlen = 0, rouge = 0, cider = 0;
  std::vector<std::vector<std::string>> ref_sets;
  for (const auto& [id, r] : refs) ref_sets.push_back(r);
  const IdfTable idf = IdfTable::build(ref_sets);
  for (const auto& [id, cand] : preds) {
    auto cs = NgramStats::from_text(cand);
    std::array<std::unordered_map<std::string, int>, 4> maxref;
    std::size_t closest = 0;
    long best_diff = -1;
    for (const auto& r : refs[id]) {
      auto rs = NgramStats::from_text(r);
      for (int n = 0; n < 4; ++n)
        for (const auto& [g, c] : rs.counts[n]) maxref[n][g] = std::max(maxref[n][g], c);
      const long diff = std::labs(static_cast<long>(rs.length) - static_cast<long>(cs.length));
      if (best_diff < 0 || diff < best_diff || (diff == best_diff && rs.length < closest)) {
        best_diff = diff;
        closest = rs.length;
      }
    }
    for (int n = 0; n < 4; ++n) {
      for (const auto& [g, c] : cs.counts[n]) correct[n] += std::min(c, maxref[n][g]);
      guess[n] += std::max<long>(0, static_cast<long>(cs.length) - n);
    }
    clen += cs.length;
    rlen += closest;
    rouge += rouge_l(cand, refs[id]);
    cider += cider_d(cand, refs[id], idf);
  }
  double logp = 0;
  for (int n = 0; n < 4; ++n) {
    logp += std::log(correct[n] / guess[n]);
    const double bp = clen < rlen ? std::exp(1 - rlen / clen) : 1.0;
    EXPECT_NEAR(report.bleu[n], bp * std::exp(logp / (n + 1)), 1e-12);
  }
  EXPECT_NEAR(report.rouge_l, rouge / preds.size(), 1e-12);
  EXPECT_NEAR(report.cider_d, cider / preds.size(), 1e-12);

  auto j = report.to_json();
  EXPECT_TRUE(j.contains("config"));
  EXPECT_EQ(j["config"]["cider_sigma"].get<double>(), 6.0);
}

}  // namespace
}  // namespace ratcap
