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

#include "ratcap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include <nlohmann/json.hpp>

#include "ratcap/tokenizer.hpp"

namespace ratcap {

namespace {

std::vector<std::string> words_of(std::string_view text) { return split_words(normalize_text(text)); }

// Closest reference length; the shorter one wins a tie.
std::size_t closest_ref_length(std::size_t cand_len, std::span<const std::vector<std::string>> refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::llabs(static_cast<long long>(r.size()) - static_cast<long long>(cand_len));
    const auto bd = std::llabs(static_cast<long long>(best) - static_cast<long long>(cand_len));
    if (d < bd || (d == bd && r.size() < best)) best = r.size();
  }
  return best;
}

BleuScores bleu_from_counts(const std::array<double, kMaxNgram>& correct, const std::array<double, kMaxNgram>& guess,
                            double cand_len, double ref_len) {
  BleuScores out{};
  if (cand_len <= 0.0) return out;
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < kMaxNgram; ++n) {
    if (guess[n] <= 0.0 || correct[n] <= 0.0) zero = true;
    if (!zero) log_sum += std::log(correct[n] / guess[n]);
    out[n] = zero ? 0.0 : bp * std::exp(log_sum / (n + 1));
  }
  return out;
}

}  // namespace

NgramStats NgramStats::from_words(std::span<const std::string> words) {
  NgramStats s;
  s.length = words.size();
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string gram;
    for (int n = 0; n < kMaxNgram && i + n < words.size(); ++n) {
      if (n) gram += ' ';
      gram += words[i + n];
      ++s.counts[n][gram];
    }
  }
  return s;
}

NgramStats NgramStats::from_text(std::string_view text) {
  auto w = words_of(text);
  return from_words(w);
}

// --- BLEU -------------------------------------------------------------------

void BleuAccumulator::add(std::string_view candidate, std::span<const std::string> references) {
  if (references.empty()) throw std::invalid_argument("bleu: at least one reference is required");
  auto cand = NgramStats::from_text(candidate);
  std::vector<std::vector<std::string>> ref_words;
  std::array<std::unordered_map<std::string, int>, kMaxNgram> max_ref{};
  for (const auto& r : references) {
    ref_words.push_back(words_of(r));
    auto rs = NgramStats::from_words(ref_words.back());
    for (int n = 0; n < kMaxNgram; ++n)
      for (const auto& [g, c] : rs.counts[n]) max_ref[n][g] = std::max(max_ref[n][g], c);
  }
  for (int n = 0; n < kMaxNgram; ++n) {
    for (const auto& [g, c] : cand.counts[n]) {
      auto it = max_ref[n].find(g);
      if (it != max_ref[n].end()) correct_[n] += std::min(c, it->second);
    }
    guess_[n] += static_cast<double>(cand.length >= static_cast<std::size_t>(n + 1) ? cand.length - n : 0);
  }
  cand_len_ += static_cast<double>(cand.length);
  ref_len_ += static_cast<double>(closest_ref_length(cand.length, ref_words));
}

BleuScores BleuAccumulator::score() const { return bleu_from_counts(correct_, guess_, cand_len_, ref_len_); }

BleuScores bleu(std::string_view candidate, std::span<const std::string> references) {
  BleuAccumulator acc;
  acc.add(candidate, references);
  return acc.score();
}

// --- ROUGE-L ----------------------------------------------------------------

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::span<const std::string> references) {
  if (references.empty()) throw std::invalid_argument("rouge_l: at least one reference is required");
  auto cand = words_of(candidate);
  if (cand.empty()) return 0.0;
  double best_p = 0.0, best_r = 0.0;
  for (const auto& ref : references) {
    auto rw = words_of(ref);
    const double lcs = static_cast<double>(lcs_length(cand, rw));
    best_p = std::max(best_p, lcs / static_cast<double>(cand.size()));
    if (!rw.empty()) best_r = std::max(best_r, lcs / static_cast<double>(rw.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) return 0.0;
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p);
}

// --- CIDEr-D ----------------------------------------------------------------

IdfTable IdfTable::build(std::span<const std::vector<std::string>> references_per_image) {
  IdfTable t;
  t.num_docs_ = references_per_image.size();
  t.log_num_docs_ = t.num_docs_ > 0 ? std::log(static_cast<double>(t.num_docs_)) : 0.0;
  for (const auto& refs : references_per_image) {
    std::set<std::string> seen;
    for (const auto& r : refs) {
      auto s = NgramStats::from_text(r);
      for (const auto& m : s.counts)
        for (const auto& [g, c] : m) seen.insert(g);
    }
    for (const auto& g : seen) t.df_[g] += 1.0;
  }
  return t;
}

double IdfTable::doc_freq(const std::string& ngram) const {
  auto it = df_.find(ngram);
  return it == df_.end() ? 0.0 : it->second;
}

namespace {

CiderScorer::Vec vectorize(const NgramStats& s, const IdfTable& idf) {
  CiderScorer::Vec v;
  for (int n = 0; n < kMaxNgram; ++n) {
    for (const auto& [g, tf] : s.counts[n]) {
      const double w = tf * (idf.log_num_docs() - std::log(std::max(1.0, idf.doc_freq(g))));
      v.weights[n][g] = w;
      v.norms[n] += w * w;
      if (n == 1) v.bigrams += tf;
    }
    v.norms[n] = std::sqrt(v.norms[n]);
  }
  return v;
}

double similarity(const CiderScorer::Vec& hyp, const CiderScorer::Vec& ref, double sigma) {
  const double delta = static_cast<double>(hyp.bigrams - ref.bigrams);
  const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
  double total = 0.0;
  for (int n = 0; n < kMaxNgram; ++n) {
    double val = 0.0;
    for (const auto& [g, w] : hyp.weights[n]) {
      auto it = ref.weights[n].find(g);
      if (it != ref.weights[n].end()) val += std::min(w, it->second) * it->second;
    }
    if (hyp.norms[n] != 0.0 && ref.norms[n] != 0.0) val /= hyp.norms[n] * ref.norms[n];
    total += val * penalty;
  }
  return total / kMaxNgram;
}

}  // namespace

CiderScorer::CiderScorer(std::span<const std::string> references, const IdfTable& idf, double sigma)
    : idf_(&idf), sigma_(sigma) {
  if (references.empty()) throw std::invalid_argument("cider_d: at least one reference is required");
  for (const auto& r : references) refs_.push_back(vectorize(NgramStats::from_text(r), idf));
}

double CiderScorer::score(std::string_view candidate) const {
  auto hyp = vectorize(NgramStats::from_text(candidate), *idf_);
  double total = 0.0;
  for (const auto& r : refs_) total += similarity(hyp, r, sigma_);
  return 10.0 * total / static_cast<double>(refs_.size());
}

double cider_d(std::string_view candidate, std::span<const std::string> references, const IdfTable& idf,
               double sigma) {
  return CiderScorer(references, idf, sigma).score(candidate);
}

// --- corpus -----------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  return {
      {"BLEU-1", bleu[0]},
      {"BLEU-2", bleu[1]},
      {"BLEU-3", bleu[2]},
      {"BLEU-4", bleu[3]},
      {"ROUGE-L", rouge_l},
      {"CIDEr-D", cider_d},
      {"images", images},
      {"config",
       {{"tokenization", "lowercase, ascii punctuation to space, whitespace split"},
        {"cider_sigma", kCiderSigma},
        {"rouge_beta", kRougeBeta},
        {"bleu_ref_length", "closest"}}},
  };
}

MetricReport corpus_eval(const std::map<std::string, std::string>& predictions,
                         const std::map<std::string, std::vector<std::string>>& references) {
  if (predictions.empty()) throw MetricInputError("corpus_eval: no predictions", {});
  std::vector<std::string> missing;
  for (const auto& [id, _] : predictions)
    if (!references.count(id)) missing.push_back(id);
  for (const auto& [id, _] : references)
    if (!predictions.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "corpus_eval: ids without a counterpart:";
    for (const auto& id : missing) msg += " " + id;
    throw MetricInputError(msg, missing);
  }

  std::vector<std::vector<std::string>> ref_sets;
  for (const auto& [_, refs] : references) ref_sets.push_back(refs);
  const IdfTable idf = IdfTable::build(ref_sets);

  MetricReport report;
  BleuAccumulator acc;
  for (const auto& [id, cand] : predictions) {
    const auto& refs = references.at(id);
    acc.add(cand, refs);
    report.rouge_l += rouge_l(cand, refs);
    report.cider_d += cider_d(cand, refs, idf);
  }
  report.images = predictions.size();
  report.bleu = acc.score();
  report.rouge_l /= static_cast<double>(report.images);
  report.cider_d /= static_cast<double>(report.images);
  return report;
}

}  // namespace ratcap
