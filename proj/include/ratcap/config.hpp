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

// Run configuration: a key = value text file with [model], [train],
// [retrieval] and [data] sections.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ratcap/model.hpp"
#include "ratcap/retrieval.hpp"
#include "ratcap/training.hpp"

namespace ratcap {

/// Corpus and artifact locations. Empty paths are unset.
struct DataConfig {
  std::string train;  // manifests
  std::string val;
  std::string test;
  std::string tokenizer;  // prebuilt BPE file; trained from train otherwise
  std::size_t bpe_vocab = 0;  // 0: use model.vocab_size
  std::string datastore;  // from build-index; built in memory otherwise
  std::string index;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

/// Every field of every section is addressable as "section.field". The
/// section objects hold the values; the typed views validate on access.
class RunConfig {
 public:
  RunConfig();

  /// Parses "[section]" headers and "key = value" lines; '#' starts a
  /// comment. Values may be quoted. Unknown sections or keys are errors.
  static RunConfig parse(std::string_view text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Sets one field from its text form, e.g. set("train.seed", "7").
  void set(std::string_view dotted_key, std::string_view value);
  /// "section.key=value".
  void apply_override(std::string_view assignment);

  ModelConfig model() const;
  TrainConfig train() const;
  RetrievalConfig retrieval() const;
  DataConfig data() const;
  /// model.memory_mode alone (valid before feat_dim is known).
  MemoryMode memory_mode() const;

  const nlohmann::json& values() const { return values_; }
  /// Canonical text form; parse(to_text()) reproduces the values.
  std::string to_text() const;
  /// FNV-1a of to_text().
  std::uint64_t hash() const;

 private:
  nlohmann::json values_;
};

}  // namespace ratcap
