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

// Caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D. Inputs are raw strings;
// every function normalizes with normalize_text() and splits on whitespace.

#pragma once

#include <array>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace ratcap {

inline constexpr int kMaxNgram = 4;
inline constexpr double kCiderSigma = 6.0;
inline constexpr double kRougeBeta = 1.2;

struct NgramStats {
  /// counts[n-1] maps an n-gram (words joined by single spaces) to its count.
  std::array<std::unordered_map<std::string, int>, kMaxNgram> counts;
  std::size_t length = 0;  // words

  static NgramStats from_text(std::string_view text);
  static NgramStats from_words(std::span<const std::string> words);
};

using BleuScores = std::array<double, kMaxNgram>;

/// Sentence BLEU-1..4: clipped n-gram precision, geometric mean, brevity
/// penalty against the closest reference length (shorter wins ties).
BleuScores bleu(std::string_view candidate, std::span<const std::string> references);

/// Sufficient statistics for corpus-level BLEU.
class BleuAccumulator {
 public:
  void add(std::string_view candidate, std::span<const std::string> references);
  BleuScores score() const;

 private:
  std::array<double, kMaxNgram> correct_{};
  std::array<double, kMaxNgram> guess_{};
  double cand_len_ = 0.0;
  double ref_len_ = 0.0;
};

/// LCS-based F-measure with beta 1.2, using the best precision and best
/// recall over the references.
double rouge_l(std::string_view candidate, std::span<const std::string> references);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

/// Document frequencies of n-grams over a reference corpus, one document
/// per image (the union of that image's references).
class IdfTable {
 public:
  static IdfTable build(std::span<const std::vector<std::string>> references_per_image);

  std::size_t num_docs() const { return num_docs_; }
  double doc_freq(const std::string& ngram) const;
  /// log(num_docs): the idf of an n-gram seen in no document.
  double log_num_docs() const { return log_num_docs_; }
  /// log(N) equals log(df) for every n-gram: all idf weights vanish.
  bool degenerate() const { return num_docs_ <= 1; }

 private:
  std::unordered_map<std::string, double> df_;
  std::size_t num_docs_ = 0;
  double log_num_docs_ = 0.0;
};

/// CIDEr-D: per n, cosine of clipped tf-idf vectors with a Gaussian length
/// penalty (sigma 6); averaged over n and references, times 10.
double cider_d(std::string_view candidate, std::span<const std::string> references, const IdfTable& idf,
               double sigma = kCiderSigma);

/// Pre-vectorized references so repeated scoring against the same image
/// (beam rewards, nearest-neighbour reports) skips the n-gram work.
class CiderScorer {
 public:
  CiderScorer(std::span<const std::string> references, const IdfTable& idf, double sigma = kCiderSigma);
  double score(std::string_view candidate) const;

  struct Vec {
    std::array<std::unordered_map<std::string, double>, kMaxNgram> weights;
    std::array<double, kMaxNgram> norms{};
    long bigrams = 0;
  };

 private:
  const IdfTable* idf_;
  double sigma_;
  std::vector<Vec> refs_;
};

struct MetricReport {
  BleuScores bleu{};
  double rouge_l = 0.0;
  double cider_d = 0.0;
  std::size_t images = 0;

  nlohmann::json to_json() const;
};

/// Corpus-level BLEU, mean ROUGE-L and mean CIDEr-D (idf from `references`).
/// Throws MetricInputError listing ids present on one side only.
MetricReport corpus_eval(const std::map<std::string, std::string>& predictions,
                         const std::map<std::string, std::vector<std::string>>& references);

class MetricInputError : public std::invalid_argument {
 public:
  MetricInputError(const std::string& what, std::vector<std::string> missing)
      : std::invalid_argument(what), missing_ids(std::move(missing)) {}
  std::vector<std::string> missing_ids;
};

}  // namespace ratcap
