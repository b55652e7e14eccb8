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

// Hierarchical navigable small-world graph over inner-product similarity.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ratcap/retrieval.hpp"

namespace ratcap {

struct HnswParams {
  std::size_t M = 32;  // link cap on upper layers; the base layer allows 2 * M
  std::size_t ef_construction = 200;
  std::uint64_t seed = 1234;
};

class HnswIndex {
 public:
  HnswIndex() = default;

  static HnswIndex build(const Datastore& store, const HnswParams& params = {});
  static HnswIndex build(std::span<const Embedding> vectors, const HnswParams& params = {});

  /// Top-k by inner product, best first. Scores are computed in float
  /// against the stored vectors.
  std::vector<Hit> search(std::span<const double> query, std::size_t k, std::size_t ef_search) const;

  std::size_t size() const { return levels_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t M() const { return M_; }
  std::uint32_t entry_point() const { return entry_; }
  int max_level() const { return max_level_; }
  int level(std::uint32_t v) const { return levels_.at(v); }
  const std::vector<std::uint32_t>& neighbors(std::uint32_t v, int layer) const;
  /// Links added after construction to make the base layer connected.
  std::size_t repaired_links() const { return repaired_; }

  /// Number of vertices reachable from the entry point on the base layer.
  std::size_t base_reachable() const;

  /// "RHNSW1", u32 count, dim, M, entry point, max level; per vertex u32
  /// level and, per layer, u32 degree plus ids; then f32 vectors.
  std::string serialize() const;
  static HnswIndex deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static HnswIndex load(const std::filesystem::path& path);
  std::uint64_t checksum() const;

 private:
  struct Candidate {
    float score;
    std::uint32_t id;
  };
  struct Visited;

  float similarity(std::span<const float> q, std::uint32_t v) const;
  std::span<const float> vec(std::uint32_t v) const { return {vectors_.data() + std::size_t{v} * dim_, dim_}; }
  std::uint32_t greedy_descent(std::span<const float> q, std::uint32_t start, int from_layer, int to_layer) const;
  std::vector<Candidate> search_layer(std::span<const float> q, std::uint32_t entry, std::size_t ef, int layer,
                                      Visited& visited) const;
  std::vector<std::uint32_t> select_neighbors(std::vector<Candidate> candidates, std::size_t cap) const;
  void insert(std::uint32_t v, int level, Visited& visited);
  void repair_connectivity(Visited& visited);

  std::size_t dim_ = 0;
  std::size_t M_ = 32;
  std::size_t ef_construction_ = 200;
  std::uint32_t entry_ = 0;
  int max_level_ = -1;
  std::vector<int> levels_;
  // links_[v][layer]
  std::vector<std::vector<std::vector<std::uint32_t>>> links_;
  std::vector<float> vectors_;
  std::size_t repaired_ = 0;
};

}  // namespace ratcap
