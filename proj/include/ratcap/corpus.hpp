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

// Corpus manifests, RGRID1 feature files and the synthetic attributed-scenes
// generator.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ratcap/retrieval.hpp"

namespace ratcap {

/// Data problems (bad manifest, missing file, duplicate id, ...).
class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorpusItem {
  FeatureGrid features;
  std::vector<std::string> captions;

  const std::string& image_id() const { return features.image_id; }
};

struct Corpus {
  std::string split;
  std::size_t feature_dim = 0;
  std::string normalization = "none";
  std::vector<CorpusItem> items;

  std::size_t size() const { return items.size(); }
  std::size_t caption_count() const;
  const CorpusItem* find(const std::string& image_id) const;
  /// FNV-1a over ids, captions and the f32 feature bytes, in item order.
  std::uint64_t checksum() const;
  /// Throws CorpusError on duplicate ids, empty caption lists or mixed dims.
  void validate() const;
};

/// "RGRID1", u32 P, u32 d_feat, little-endian f32 row-major.
void write_grid_file(const std::filesystem::path& path, const Tensor& grid);
Tensor read_grid_file(const std::filesystem::path& path);

/// Reads a manifest:
///   {"format": "ratcap-manifest", "version": 1, "split": "...",
///    "feature_dim": D, "normalization": "none",
///    "items": [{"image_id": "...", "feature_file": "rel/or/abs.rgrid"
///               | "grid": [[...], ...], "captions": ["...", ...]}]}
/// Relative feature paths resolve against the manifest's directory.
Corpus ingest(const std::filesystem::path& manifest);

/// Writes `<dir>/<split>.json` plus one RGRID1 file per item under
/// `<dir>/features/<split>/`. Returns the manifest path.
std::filesystem::path save_corpus(const Corpus& corpus, const std::filesystem::path& dir);

/// Every caption of every item, keyed by image id (metrics input).
std::map<std::string, std::vector<std::string>> references_of(const Corpus& corpus);

/// Datastore over the train split only; throws if `corpus.split` is not
/// "train".
Datastore build_datastore(const Corpus& corpus, Aggregation aggregation, bool normalize);

struct SynthAxis {
  std::string name;
  /// values[i][0] is the canonical word; the rest are synonyms.
  std::vector<std::vector<std::string>> values;
};

struct SynthSpec {
  std::vector<SynthAxis> axes;
  /// Items per attribute combination, per split.
  std::vector<std::pair<std::string, std::size_t>> splits{{"train", 4}, {"val", 1}, {"test", 1}};
  std::size_t captions_per_item = 5;
  std::size_t feature_dim = 32;
  std::size_t grid_positions = 4;
  double noise = 0.1;
  std::uint64_t seed = 1234;

  /// color x object x place with synonym variation.
  static SynthSpec attributed_scenes();
  void validate() const;
  std::size_t combinations() const;
  nlohmann::json to_json() const;
};

/// Deterministic expansion of `spec`: split name -> corpus. Each attribute
/// combination gets a fixed random unit direction; every grid row is that
/// direction plus Gaussian noise. Features are rounded to f32 so files and
/// memory agree.
std::map<std::string, Corpus> synth_generate(const SynthSpec& spec);

/// synth_generate plus save_corpus for each split.
std::map<std::string, std::filesystem::path> synth_write(const SynthSpec& spec, const std::filesystem::path& dir);

/// Attribute values (canonical words) of a synthetic item, in axis order.
std::vector<std::string> synth_attributes(const SynthSpec& spec, std::size_t combination);

}  // namespace ratcap
