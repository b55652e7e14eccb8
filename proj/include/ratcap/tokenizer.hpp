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

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ratcap {

/// Caption normalization shared by the tokenizer and the metrics: ASCII
/// lowercase, ASCII punctuation replaced by spaces, whitespace collapsed.
std::string normalize_text(std::string_view text);
std::vector<std::string> split_words(std::string_view normalized);

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
/// Ids 3..258 are the 256 single-byte fallback tokens.
inline constexpr int kFirstByteId = 3;
inline constexpr std::size_t kBaseVocabSize = 3 + 256;
inline constexpr std::size_t kDefaultMaxLen = 40;

struct TokenSequence {
  std::vector<int> ids;
  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

class Vocabulary {
 public:
  /// Specials plus the byte alphabet.
  static Vocabulary base();

  /// Appends `token` if new; returns its id either way.
  int add(const std::string& token);
  int id(const std::string& token) const;
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }
  const std::string& token(int id) const;
  std::size_t size() const { return id_to_token_.size(); }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct Merge {
  std::string left;
  std::string right;
};

class MergeTable {
 public:
  void add(Merge merge);
  /// Rank of the pair, or -1 when it is not a learned merge.
  int rank(const std::string& left, const std::string& right) const;
  const std::vector<Merge>& merges() const { return merges_; }
  std::size_t size() const { return merges_.size(); }

 private:
  std::vector<Merge> merges_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
};

class BpeTokenizer {
 public:
  BpeTokenizer() : vocab_(Vocabulary::base()) {}
  BpeTokenizer(Vocabulary vocab, MergeTable merges, std::size_t max_len = kDefaultMaxLen);

  /// [BOS, pieces..., EOS], truncated to max_len with EOS kept last.
  TokenSequence encode(std::string_view text) const;
  /// Inverse of encode on normalized text; specials are dropped.
  std::string decode(std::span<const int> ids) const;
  std::string decode(const TokenSequence& seq) const { return decode(seq.ids); }

  const Vocabulary& vocab() const { return vocab_; }
  const MergeTable& merges() const { return merges_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t max_len() const { return max_len_; }
  void set_max_len(std::size_t max_len);

  /// "ratcap-bpe v1 <vocab_size>", merge lines "rank\tleft\tright", then
  /// token lines "id\ttoken". Control bytes, backslash and non-ASCII bytes
  /// are written as escapes so the file stays plain text.
  void save(const std::filesystem::path& path) const;
  static BpeTokenizer load(const std::filesystem::path& path, std::size_t max_len = kDefaultMaxLen);
  std::string serialize() const;
  static BpeTokenizer deserialize(std::string_view text, std::size_t max_len = kDefaultMaxLen);

 private:
  std::vector<int> encode_word(const std::string& word) const;

  Vocabulary vocab_;
  MergeTable merges_;
  std::size_t max_len_ = kDefaultMaxLen;
};

struct BpeTrainResult {
  BpeTokenizer tokenizer;
  /// False when the corpus ran out of pairs before the target size.
  bool target_reached = true;
};

/// Greedy most-frequent-pair merging over normalized words. Ties go to the
/// lexicographically smallest (left, right) pair.
BpeTrainResult train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size,
                         std::size_t max_len = kDefaultMaxLen);

/// The symbol sequence a word starts from before any merge: a leading space
/// byte followed by the word's bytes, one symbol each.
std::vector<std::string> initial_symbols(const std::string& word);

}  // namespace ratcap
