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

#include "ratcap/hnsw.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <queue>
#include <random>
#include <sstream>

namespace ratcap {

struct HnswIndex::Visited {
  std::vector<std::uint32_t> mark;
  std::uint32_t tag = 0;

  explicit Visited(std::size_t n) : mark(n, 0) {}
  void reset() {
    if (++tag == 0) {
      std::fill(mark.begin(), mark.end(), 0);
      tag = 1;
    }
  }
  bool insert(std::uint32_t v) {
    if (mark[v] == tag) return false;
    mark[v] = tag;
    return true;
  }
};

namespace {

constexpr char kMagic[] = "RHNSW1";
constexpr std::size_t kMagicLen = 6;

// Heap orders; ties fall back on the vertex id so runs are reproducible.
struct BetterFirst {
  template <class C>
  bool operator()(const C& a, const C& b) const {
    return a.score < b.score || (a.score == b.score && a.id > b.id);
  }
};
struct WorseFirst {
  template <class C>
  bool operator()(const C& a, const C& b) const {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  }
};

std::vector<float> to_float(std::span<const double> q) { return {q.begin(), q.end()}; }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw RetrievalError("hnsw index: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = kMagicLen;
};

}  // namespace

float HnswIndex::similarity(std::span<const float> q, std::uint32_t v) const {
  const float* p = vectors_.data() + std::size_t{v} * dim_;
  float s = 0.0f;
  for (std::size_t i = 0; i < dim_; ++i) s += q[i] * p[i];
  return s;
}

const std::vector<std::uint32_t>& HnswIndex::neighbors(std::uint32_t v, int layer) const {
  if (layer < 0 || layer > levels_.at(v)) throw std::out_of_range("hnsw: vertex has no such layer");
  return links_[v][layer];
}

std::uint32_t HnswIndex::greedy_descent(std::span<const float> q, std::uint32_t start, int from_layer,
                                        int to_layer) const {
  std::uint32_t cur = start;
  float best = similarity(q, cur);
  for (int layer = from_layer; layer > to_layer; --layer) {
    for (bool moved = true; moved;) {
      moved = false;
      for (std::uint32_t n : links_[cur][layer]) {
        const float s = similarity(q, n);
        if (s > best || (s == best && n < cur)) {
          best = s;
          cur = n;
          moved = true;
        }
      }
    }
  }
  return cur;
}

std::vector<HnswIndex::Candidate> HnswIndex::search_layer(std::span<const float> q, std::uint32_t entry,
                                                          std::size_t ef, int layer, Visited& visited) const {
  visited.reset();
  std::priority_queue<Candidate, std::vector<Candidate>, BetterFirst> frontier;
  std::priority_queue<Candidate, std::vector<Candidate>, WorseFirst> found;
  const Candidate start{similarity(q, entry), entry};
  visited.insert(entry);
  frontier.push(start);
  found.push(start);
  while (!frontier.empty()) {
    const Candidate c = frontier.top();
    if (found.size() >= ef && c.score < found.top().score) break;
    frontier.pop();
    for (std::uint32_t n : links_[c.id][layer]) {
      if (!visited.insert(n)) continue;
      const Candidate cand{similarity(q, n), n};
      if (found.size() < ef || WorseFirst{}(cand, found.top())) {
        frontier.push(cand);
        found.push(cand);
        if (found.size() > ef) found.pop();
      }
    }
  }
  std::vector<Candidate> out;
  out.reserve(found.size());
  for (; !found.empty(); found.pop()) out.push_back(found.top());
  std::reverse(out.begin(), out.end());
  return out;
}

// Keep a candidate only if it is more similar to the base point than to any
// neighbour already kept. Candidates arrive best first.
std::vector<std::uint32_t> HnswIndex::select_neighbors(std::vector<Candidate> candidates, std::size_t cap) const {
  std::vector<std::uint32_t> kept;
  for (const auto& c : candidates) {
    if (kept.size() >= cap) break;
    bool good = true;
    const auto cv = vec(c.id);
    for (std::uint32_t r : kept) {
      if (similarity(cv, r) > c.score) {
        good = false;
        break;
      }
    }
    if (good) kept.push_back(c.id);
  }
  return kept;
}

void HnswIndex::insert(std::uint32_t v, int level, Visited& visited) {
  links_[v].assign(level + 1, {});
  if (max_level_ < 0) {
    entry_ = v;
    max_level_ = level;
    return;
  }
  const auto q = vec(v);
  std::uint32_t ep = greedy_descent(q, entry_, max_level_, level);
  for (int layer = std::min(level, max_level_); layer >= 0; --layer) {
    auto found = search_layer(q, ep, ef_construction_, layer, visited);
    ep = found.front().id;
    const std::size_t cap = layer == 0 ? 2 * M_ : M_;
    links_[v][layer] = select_neighbors(found, cap);
    for (std::uint32_t n : links_[v][layer]) {
      auto& adj = links_[n][layer];
      adj.push_back(v);
      if (adj.size() <= cap) continue;
      const auto nv = vec(n);
      std::vector<Candidate> cands;
      cands.reserve(adj.size());
      for (std::uint32_t a : adj) cands.push_back({similarity(nv, a), a});
      std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return BetterFirst{}(b, a); });
      adj = select_neighbors(std::move(cands), cap);
    }
  }
  if (level > max_level_) {
    entry_ = v;
    max_level_ = level;
  }
}

// Pruning can strand a vertex with no incoming base-layer link. Give each
// stranded vertex an in-link from its most similar reachable vertex that
// still has room.
void HnswIndex::repair_connectivity(Visited& visited) {
  const std::size_t n = size();
  std::vector<std::uint8_t> reached(n, 0);
  auto flood = [&](std::uint32_t from) {
    std::vector<std::uint32_t> stack{from};
    reached[from] = 1;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (std::uint32_t w : links_[u][0])
        if (!reached[w]) {
          reached[w] = 1;
          stack.push_back(w);
        }
    }
  };
  flood(entry_);
  for (std::uint32_t v = 0; v < n; ++v) {
    if (reached[v]) continue;
    auto found = search_layer(vec(v), entry_, std::max(ef_construction_, 2 * M_), 0, visited);
    std::optional<std::uint32_t> host;
    for (const auto& c : found)
      if (reached[c.id] && links_[c.id][0].size() < 2 * M_) {
        host = c.id;
        break;
      }
    if (!host) {
      const auto q = vec(v);
      float best = 0.0f;
      for (std::uint32_t u = 0; u < n; ++u) {
        if (!reached[u] || links_[u][0].size() >= 2 * M_) continue;
        const float s = similarity(q, u);
        if (!host || s > best) {
          host = u;
          best = s;
        }
      }
    }
    if (!host) throw RetrievalError("hnsw: cannot connect base layer without exceeding the link cap");
    links_[*host][0].push_back(v);
    ++repaired_;
    flood(v);
  }
}

HnswIndex HnswIndex::build(const Datastore& store, const HnswParams& params) {
  std::vector<Embedding> vectors;
  vectors.reserve(store.size());
  for (const auto& e : store.entries()) vectors.push_back(e.embedding);
  return build(vectors, params);
}

HnswIndex HnswIndex::build(std::span<const Embedding> vectors, const HnswParams& params) {
  if (vectors.empty()) throw RetrievalError("hnsw: cannot build an index over an empty store");
  if (params.M < 2) throw std::invalid_argument("hnsw: M must be at least 2");
  HnswIndex idx;
  idx.dim_ = vectors.front().size();
  idx.M_ = params.M;
  idx.ef_construction_ = std::max(params.ef_construction, params.M);
  const std::size_t n = vectors.size();
  idx.vectors_.reserve(n * idx.dim_);
  for (const auto& v : vectors) {
    if (v.size() != idx.dim_) throw RetrievalError("hnsw: vectors differ in dimension");
    idx.vectors_.insert(idx.vectors_.end(), v.begin(), v.end());
  }

  std::mt19937_64 rng(params.seed);
  const double level_mult = 1.0 / std::log(static_cast<double>(params.M));
  idx.levels_.resize(n);
  for (auto& l : idx.levels_) {
    // u in (0, 1], from 53 random bits so the draw is library-independent.
    const double u = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
    l = static_cast<int>(std::floor(-std::log(u) * level_mult));
  }
  idx.links_.resize(n);
  Visited visited(n);
  for (std::uint32_t v = 0; v < n; ++v) idx.insert(v, idx.levels_[v], visited);
  idx.repair_connectivity(visited);
  return idx;
}

std::vector<Hit> HnswIndex::search(std::span<const double> query, std::size_t k, std::size_t ef_search) const {
  if (size() == 0) throw RetrievalError("hnsw: search on an empty index");
  if (query.size() != dim_) throw RetrievalError("hnsw: query dimension does not match the index");
  if (k == 0) return {};
  const auto q = to_float(query);
  Visited visited(size());
  const std::uint32_t ep = greedy_descent(q, entry_, max_level_, 0);
  auto found = search_layer(q, ep, std::max(ef_search, k), 0, visited);
  if (found.size() > k) found.resize(k);
  std::vector<Hit> hits;
  hits.reserve(found.size());
  for (const auto& c : found) hits.push_back({c.id, c.score});
  return hits;
}

std::size_t HnswIndex::base_reachable() const {
  if (size() == 0) return 0;
  std::vector<std::uint8_t> seen(size(), 0);
  std::vector<std::uint32_t> queue{entry_};
  seen[entry_] = 1;
  for (std::size_t head = 0; head < queue.size(); ++head)
    for (std::uint32_t w : links_[queue[head]][0])
      if (!seen[w]) {
        seen[w] = 1;
        queue.push_back(w);
      }
  return queue.size();
}

std::string HnswIndex::serialize() const {
  std::string out(kMagic, kMagicLen);
  put_u32(out, static_cast<std::uint32_t>(size()));
  put_u32(out, static_cast<std::uint32_t>(dim_));
  put_u32(out, static_cast<std::uint32_t>(M_));
  put_u32(out, entry_);
  put_u32(out, static_cast<std::uint32_t>(std::max(max_level_, 0)));
  for (std::size_t v = 0; v < size(); ++v) {
    put_u32(out, static_cast<std::uint32_t>(levels_[v]));
    for (const auto& adj : links_[v]) {
      put_u32(out, static_cast<std::uint32_t>(adj.size()));
      for (std::uint32_t w : adj) put_u32(out, w);
    }
  }
  for (float f : vectors_) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
  }
  return out;
}

HnswIndex HnswIndex::deserialize(std::string_view bytes) {
  if (bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen))
    throw RetrievalError("hnsw index: bad magic (expected RHNSW1)");
  Reader in(bytes);
  HnswIndex idx;
  const std::uint32_t n = in.u32();
  idx.dim_ = in.u32();
  idx.M_ = in.u32();
  idx.entry_ = in.u32();
  idx.max_level_ = static_cast<int>(in.u32());
  if (n == 0 || idx.entry_ >= n) throw RetrievalError("hnsw index: bad header");
  idx.levels_.resize(n);
  idx.links_.resize(n);
  for (std::uint32_t v = 0; v < n; ++v) {
    idx.levels_[v] = static_cast<int>(in.u32());
    if (idx.levels_[v] > idx.max_level_) throw RetrievalError("hnsw index: vertex level above max level");
    idx.links_[v].resize(idx.levels_[v] + 1);
    for (auto& adj : idx.links_[v]) {
      adj.resize(in.u32());
      for (auto& w : adj) {
        w = in.u32();
        if (w >= n) throw RetrievalError("hnsw index: neighbour id out of range");
      }
    }
  }
  idx.vectors_.resize(std::size_t{n} * idx.dim_);
  for (auto& f : idx.vectors_) f = in.f32();
  if (!in.done()) throw RetrievalError("hnsw index: trailing bytes");
  return idx;
}

void HnswIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RetrievalError("cannot write " + path.string());
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RetrievalError("write failed: " + path.string());
}

HnswIndex HnswIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RetrievalError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t HnswIndex::checksum() const { return fnv1a(serialize()); }

}  // namespace ratcap
