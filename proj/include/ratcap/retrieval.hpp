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

// Knowledge retriever: grid pooling, the caption datastore, exact
// inner-product search and caption retrieval with self-exclusion.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "ratcap/metrics.hpp"
#include "ratcap/tensor.hpp"

namespace ratcap {

class HnswIndex;

class RetrievalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-image grid of feature vectors, P rows by d_feat columns.
struct FeatureGrid {
  std::string image_id;
  Tensor grid;

  std::size_t positions() const { return grid.rows(); }
  std::size_t feature_dim() const { return grid.cols(); }
};

enum class Aggregation { kMean, kMax, kL2NormSum };

std::string to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view name);

using Embedding = std::vector<double>;

/// mean / max are column-wise. l2norm_sum normalizes each row, sums, and
/// normalizes the sum; zero rows are skipped and an all-zero grid throws.
Embedding embed_aggregate(const FeatureGrid& grid, Aggregation method);

/// Inner product. Throws on a dimension mismatch.
double relevance(std::span<const double> a, std::span<const double> b);

void normalize_in_place(Embedding& v);

struct DatastoreEntry {
  std::string image_id;
  Embedding embedding;
  std::vector<std::string> captions;
};

/// External memory: image id to (embedding, captions). Entry order is the
/// insertion order and doubles as the vertex id of an index built over it.
class Datastore {
 public:
  explicit Datastore(Aggregation aggregation = Aggregation::kMean, bool normalized = false)
      : aggregation_(aggregation), normalized_(normalized) {}

  /// Throws on a duplicate id, an empty caption list or a dimension change.
  void add(DatastoreEntry entry);
  /// Embeds the grid with the store's aggregation (and normalization).
  void add(const FeatureGrid& grid, std::vector<std::string> captions);

  /// The query-side embedding matching how the stored ones were made.
  Embedding embed_query(const FeatureGrid& grid) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return dim_; }
  Aggregation aggregation() const { return aggregation_; }
  bool normalized() const { return normalized_; }
  const DatastoreEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<DatastoreEntry>& entries() const { return entries_; }
  std::optional<std::size_t> find(const std::string& image_id) const;

  /// JSON lines: a header record, then one record per entry.
  std::string serialize() const;
  static Datastore deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Datastore load(const std::filesystem::path& path);
  std::uint64_t checksum() const;

 private:
  Aggregation aggregation_;
  bool normalized_;
  std::size_t dim_ = 0;
  std::vector<DatastoreEntry> entries_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct Hit {
  std::uint32_t index = 0;
  double score = 0.0;
};

/// Orders by score descending, then image id ascending.
void sort_hits(std::vector<Hit>& hits, const Datastore& store);

struct KnnResult {
  std::vector<Hit> hits;
  /// Fewer than the requested number of results exist.
  bool truncated = false;
};

KnnResult exact_knn(std::span<const double> query, const Datastore& store, std::size_t k);

enum class KUnit { kCaptions, kImages };

std::string to_string(KUnit u);
KUnit parse_k_unit(std::string_view name);

struct RetrievalConfig {
  std::size_t k = 10;
  Aggregation aggregation = Aggregation::kMean;
  bool exact = false;
  bool normalize = false;
  KUnit k_unit = KUnit::kCaptions;
  std::size_t M = 32;
  std::size_t ef_construction = 200;
  std::size_t ef_search = 64;
  std::uint64_t seed = 1234;

  void validate() const;
  nlohmann::json to_json() const;
  static RetrievalConfig from_json(const nlohmann::json& j);
};

struct RetrievalResult {
  std::vector<std::string> captions;
  /// Images the captions came from, in rank order.
  std::vector<std::string> image_ids;
  /// Fewer than k captions (or images) were available after exclusion.
  bool short_result = false;
};

/// Searches exactly or through `index` (required unless cfg.exact), drops
/// `exclude_id`, and concatenates caption lists in rank order.
RetrievalResult retrieve_captions(std::span<const double> query, const Datastore& store, const HnswIndex* index,
                                  const RetrievalConfig& cfg, std::optional<std::string_view> exclude_id = {});
RetrievalResult retrieve_captions(const FeatureGrid& query, const Datastore& store, const HnswIndex* index,
                                  const RetrievalConfig& cfg, std::optional<std::string_view> exclude_id = {});

struct NnQueryItem {
  std::string image_id;
  Embedding embedding;
  std::vector<std::string> references;
};

struct MetricRow {
  BleuScores bleu{};
  double rouge_l = 0.0;
  double cider_d = 0.0;
};

struct NnQualityRow {
  std::size_t k = 0;
  MetricRow mean;
  MetricRow oracle;
  std::size_t images = 0;
  std::size_t skipped = 0;
};

/// Scores each retrieved caption against the query's references. `mean` is
/// the average over all scored captions, `oracle` the average over images of
/// the best caption. One retrieval at the largest k feeds every smaller k.
std::vector<NnQualityRow> nn_quality_report(std::span<const NnQueryItem> queries, const Datastore& store,
                                            const HnswIndex* index, const RetrievalConfig& cfg,
                                            std::span<const std::size_t> ks, bool exclude_self = true);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace ratcap
