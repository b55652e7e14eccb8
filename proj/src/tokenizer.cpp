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

#include "ratcap/tokenizer.hpp"

#include <cctype>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ratcap {

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    const bool is_ascii = c < 0x80;
    if (is_ascii && (std::isspace(c) || std::ispunct(c) || std::iscntrl(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(is_ascii ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  return out;
}

std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    while (i < normalized.size() && normalized[i] == ' ') ++i;
    std::size_t j = i;
    while (j < normalized.size() && normalized[j] != ' ') ++j;
    if (j > i) words.emplace_back(normalized.substr(i, j - i));
    i = j;
  }
  return words;
}

std::vector<std::string> initial_symbols(const std::string& word) {
  std::vector<std::string> symbols;
  symbols.reserve(word.size() + 1);
  symbols.emplace_back(" ");
  for (char c : word) symbols.emplace_back(1, c);
  return symbols;
}

// --- Vocabulary -----------------------------------------------------------

Vocabulary Vocabulary::base() {
  Vocabulary v;
  v.add("<pad>");
  v.add("<bos>");
  v.add("<eos>");
  for (int b = 0; b < 256; ++b) v.add(std::string(1, static_cast<char>(b)));
  return v;
}

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
  if (inserted) id_to_token_.push_back(token);
  return it->second;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  if (it == token_to_id_.end()) throw std::out_of_range("unknown token");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

// --- MergeTable -----------------------------------------------------------

void MergeTable::add(Merge merge) {
  auto key = std::make_pair(merge.left, merge.right);
  if (ranks_.count(key)) throw std::invalid_argument("duplicate merge: " + merge.left + " + " + merge.right);
  ranks_.emplace(std::move(key), static_cast<int>(merges_.size()));
  merges_.push_back(std::move(merge));
}

int MergeTable::rank(const std::string& left, const std::string& right) const {
  auto it = ranks_.find({left, right});
  return it == ranks_.end() ? -1 : it->second;
}

// --- training -------------------------------------------------------------

BpeTrainResult train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size, std::size_t max_len) {
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
  if (target_vocab_size < kBaseVocabSize) {
    throw std::invalid_argument("train_bpe: target " + std::to_string(target_vocab_size) +
                                " is below the base alphabet of " + std::to_string(kBaseVocabSize));
  }

  std::map<std::string, long> word_freq;
  for (const auto& line : corpus)
    for (auto& w : split_words(normalize_text(line))) ++word_freq[w];

  std::vector<std::vector<std::string>> words;
  std::vector<long> freqs;
  for (const auto& [w, f] : word_freq) {
    words.push_back(initial_symbols(w));
    freqs.push_back(f);
  }

  Vocabulary vocab = Vocabulary::base();
  MergeTable merges;
  while (vocab.size() < target_vocab_size) {
    std::map<std::pair<std::string, std::string>, long> pair_counts;
    for (std::size_t w = 0; w < words.size(); ++w)
      for (std::size_t i = 0; i + 1 < words[w].size(); ++i) pair_counts[{words[w][i], words[w][i + 1]}] += freqs[w];
    if (pair_counts.empty()) break;

    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    const std::string joined = left + right;

    for (auto& symbols : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          next.push_back(joined);
          ++i;
        } else {
          next.push_back(std::move(symbols[i]));
        }
      }
      symbols = std::move(next);
    }
    merges.add({left, right});
    vocab.add(joined);
  }

  BpeTrainResult result{BpeTokenizer(std::move(vocab), std::move(merges), max_len), true};
  result.target_reached = result.tokenizer.vocab_size() >= target_vocab_size;
  return result;
}

// --- encode / decode ------------------------------------------------------

BpeTokenizer::BpeTokenizer(Vocabulary vocab, MergeTable merges, std::size_t max_len)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {
  set_max_len(max_len);
}

void BpeTokenizer::set_max_len(std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("max_len must leave room for BOS and EOS");
  max_len_ = max_len;
}

std::vector<int> BpeTokenizer::encode_word(const std::string& word) const {
  std::vector<std::string> symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const int r = merges_.rank(symbols[i], symbols[i + 1]);
      if (r >= 0 && r < best_rank) best_rank = r;
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const Merge& m = merges_.merges()[static_cast<std::size_t>(best_rank)];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
        next.push_back(m.left + m.right);
        ++i;
      } else {
        next.push_back(std::move(symbols[i]));
      }
    }
    symbols = std::move(next);
  }
  std::vector<int> ids;
  ids.reserve(symbols.size());
  for (const auto& s : symbols) ids.push_back(vocab_.id(s));
  return ids;
}

TokenSequence BpeTokenizer::encode(std::string_view text) const {
  TokenSequence seq;
  seq.ids.push_back(kBosId);
  const std::size_t budget = max_len_ - 2;
  for (const auto& word : split_words(normalize_text(text))) {
    for (int id : encode_word(word)) {
      if (seq.ids.size() - 1 >= budget) break;
      seq.ids.push_back(id);
    }
    if (seq.ids.size() - 1 >= budget) break;
  }
  seq.ids.push_back(kEosId);
  return seq;
}

std::string BpeTokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    const std::string& tok = vocab_.token(id);
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out += tok;
  }
  if (!out.empty() && out.front() == ' ') out.erase(out.begin());
  return out;
}

// --- serialization --------------------------------------------------------

namespace {

std::string escape(const std::string& s) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else if (c < 0x20 || c >= 0x7f) {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 15];
    } else out.push_back(static_cast<char>(c));
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i >= s.size()) throw std::runtime_error("bpe file: dangling escape");
    switch (s[i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'x': {
        if (i + 2 >= s.size()) throw std::runtime_error("bpe file: short \\x escape");
        out.push_back(static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16)));
        i += 2;
        break;
      }
      default: throw std::runtime_error("bpe file: unknown escape");
    }
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == '\t') {
      fields.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return fields;
}

}  // namespace

std::string BpeTokenizer::serialize() const {
  std::ostringstream out;
  out << "ratcap-bpe v1 " << vocab_.size() << '\n';
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& m = merges_.merges()[r];
    out << r << '\t' << escape(m.left) << '\t' << escape(m.right) << '\n';
  }
  for (std::size_t id = 0; id < vocab_.size(); ++id) out << id << '\t' << escape(vocab_.token(static_cast<int>(id))) << '\n';
  return out.str();
}

BpeTokenizer BpeTokenizer::deserialize(std::string_view text, std::size_t max_len) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("bpe file: missing header");
  std::istringstream header(line);
  std::string magic, version;
  std::size_t declared = 0;
  header >> magic >> version >> declared;
  if (magic != "ratcap-bpe" || version != "v1") throw std::runtime_error("bpe file: bad header '" + line + "'");

  Vocabulary vocab;
  MergeTable merges;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    const std::size_t index = std::stoul(std::string(fields[0]));
    if (fields.size() == 3) {
      if (index != merges.size()) throw std::runtime_error("bpe file: merge ranks out of order at line " + std::to_string(lineno));
      merges.add({unescape(fields[1]), unescape(fields[2])});
    } else if (fields.size() == 2) {
      if (index != vocab.size()) throw std::runtime_error("bpe file: token ids out of order at line " + std::to_string(lineno));
      if (vocab.add(unescape(fields[1])) != static_cast<int>(index))
        throw std::runtime_error("bpe file: duplicate token at line " + std::to_string(lineno));
    } else {
      throw std::runtime_error("bpe file: malformed line " + std::to_string(lineno));
    }
  }
  if (vocab.size() != declared) {
    throw std::runtime_error("bpe file: header declares " + std::to_string(declared) + " tokens, found " +
                             std::to_string(vocab.size()));
  }
  if (vocab.size() < kBaseVocabSize || vocab.token(kPadId) != "<pad>" || vocab.token(kBosId) != "<bos>" ||
      vocab.token(kEosId) != "<eos>") {
    throw std::runtime_error("bpe file: special tokens missing");
  }
  for (const auto& m : merges.merges())
    if (!vocab.contains(m.left + m.right)) throw std::runtime_error("bpe file: merge result missing from vocabulary");
  return BpeTokenizer(std::move(vocab), std::move(merges), max_len);
}

void BpeTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize();
}

BpeTokenizer BpeTokenizer::load(const std::filesystem::path& path, std::size_t max_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str(), max_len);
}

}  // namespace ratcap
