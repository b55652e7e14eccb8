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

#include "ratcap/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ratcap/hnsw.hpp"

namespace ratcap {

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::kMean: return "mean";
    case Aggregation::kMax: return "max";
    case Aggregation::kL2NormSum: return "l2norm_sum";
  }
  return "?";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean") return Aggregation::kMean;
  if (name == "max") return Aggregation::kMax;
  if (name == "l2norm_sum") return Aggregation::kL2NormSum;
  throw std::invalid_argument("unknown aggregation '" + std::string(name) + "' (mean|max|l2norm_sum)");
}

std::string to_string(KUnit u) { return u == KUnit::kCaptions ? "captions" : "images"; }

KUnit parse_k_unit(std::string_view name) {
  if (name == "captions") return KUnit::kCaptions;
  if (name == "images") return KUnit::kImages;
  throw std::invalid_argument("unknown k_unit '" + std::string(name) + "' (captions|images)");
}

void RetrievalConfig::validate() const {
  if (k < 1) throw std::invalid_argument("retrieval: k must be at least 1");
  if (ef_search < k) throw std::invalid_argument("retrieval: ef_search must be at least k");
  if (M < 2) throw std::invalid_argument("retrieval: M must be at least 2");
}

nlohmann::json RetrievalConfig::to_json() const {
  return {{"k", k},
          {"aggregation", to_string(aggregation)},
          {"exact", exact},
          {"normalize", normalize},
          {"k_unit", to_string(k_unit)},
          {"M", M},
          {"ef_construction", ef_construction},
          {"ef_search", ef_search},
          {"seed", seed}};
}

RetrievalConfig RetrievalConfig::from_json(const nlohmann::json& j) {
  RetrievalConfig c;
  c.k = j.at("k").get<std::size_t>();
  c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  c.exact = j.at("exact").get<bool>();
  c.normalize = j.at("normalize").get<bool>();
  c.k_unit = parse_k_unit(j.at("k_unit").get<std::string>());
  c.M = j.at("M").get<std::size_t>();
  c.ef_construction = j.at("ef_construction").get<std::size_t>();
  c.ef_search = j.at("ef_search").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Embedding embed_aggregate(const FeatureGrid& grid, Aggregation method) {
  if (!grid.grid.defined() || grid.grid.dim() != 2 || grid.positions() == 0)
    throw RetrievalError("embed_aggregate: empty grid for '" + grid.image_id + "'");
  const std::size_t p = grid.positions(), d = grid.feature_dim();
  const auto x = grid.grid.data();
  Embedding out(d, 0.0);
  switch (method) {
    case Aggregation::kMean:
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < d; ++c) out[c] += x[r * d + c];
      for (auto& v : out) v /= static_cast<double>(p);
      break;
    case Aggregation::kMax:
      std::copy(x.begin(), x.begin() + d, out.begin());
      for (std::size_t r = 1; r < p; ++r)
        for (std::size_t c = 0; c < d; ++c) out[c] = std::max(out[c], x[r * d + c]);
      break;
    case Aggregation::kL2NormSum: {
      std::size_t used = 0;
      for (std::size_t r = 0; r < p; ++r) {
        const auto row = x.subspan(r * d, d);
        const double norm = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
        if (norm == 0.0) continue;
        ++used;
        for (std::size_t c = 0; c < d; ++c) out[c] += row[c] / norm;
      }
      if (used == 0) throw RetrievalError("embed_aggregate: all-zero grid for '" + grid.image_id + "'");
      normalize_in_place(out);
      break;
    }
  }
  for (double v : out)
    if (!std::isfinite(v)) throw RetrievalError("embed_aggregate: non-finite embedding for '" + grid.image_id + "'");
  return out;
}

double relevance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw RetrievalError("relevance: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize_in_place(Embedding& v) {
  const double norm = std::sqrt(relevance(v, v));
  if (norm == 0.0) throw RetrievalError("cannot normalize a zero embedding");
  for (auto& x : v) x /= norm;
}

// --- Datastore --------------------------------------------------------------

void Datastore::add(DatastoreEntry entry) {
  if (entry.captions.empty()) throw RetrievalError("datastore: '" + entry.image_id + "' has no captions");
  if (entry.embedding.empty()) throw RetrievalError("datastore: '" + entry.image_id + "' has an empty embedding");
  if (by_id_.count(entry.image_id)) throw RetrievalError("datastore: duplicate image id '" + entry.image_id + "'");
  if (!entries_.empty() && entry.embedding.size() != dim_)
    throw RetrievalError("datastore: '" + entry.image_id + "' has dimension " + std::to_string(entry.embedding.size()) +
                         ", store has " + std::to_string(dim_));
  dim_ = entry.embedding.size();
  by_id_.emplace(entry.image_id, entries_.size());
  entries_.push_back(std::move(entry));
}

Embedding Datastore::embed_query(const FeatureGrid& grid) const {
  auto e = embed_aggregate(grid, aggregation_);
  if (normalized_ && aggregation_ != Aggregation::kL2NormSum) normalize_in_place(e);
  return e;
}

void Datastore::add(const FeatureGrid& grid, std::vector<std::string> captions) {
  add(DatastoreEntry{grid.image_id, embed_query(grid), std::move(captions)});
}

std::optional<std::size_t> Datastore::find(const std::string& image_id) const {
  auto it = by_id_.find(image_id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::string Datastore::serialize() const {
  std::string out = nlohmann::json{{"format", "ratcap-datastore"},
                                   {"version", 1},
                                   {"aggregation", to_string(aggregation_)},
                                   {"normalized", normalized_},
                                   {"dim", dim_},
                                   {"count", entries_.size()}}
                        .dump();
  out += '\n';
  for (const auto& e : entries_) {
    out += nlohmann::json{{"image_id", e.image_id}, {"embedding", e.embedding}, {"captions", e.captions}}.dump();
    out += '\n';
  }
  return out;
}

Datastore Datastore::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw RetrievalError("datastore: empty file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw RetrievalError(std::string("datastore: bad header: ") + e.what());
  }
  if (header.value("format", "") != "ratcap-datastore") throw RetrievalError("datastore: not a ratcap datastore");
  Datastore store(parse_aggregation(header.at("aggregation").get<std::string>()), header.at("normalized").get<bool>());
  const auto count = header.at("count").get<std::size_t>();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      store.add({j.at("image_id").get<std::string>(), j.at("embedding").get<Embedding>(),
                 j.at("captions").get<std::vector<std::string>>()});
    } catch (const nlohmann::json::exception& e) {
      throw RetrievalError("datastore line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (store.size() != count)
    throw RetrievalError("datastore: header says " + std::to_string(count) + " entries, found " +
                         std::to_string(store.size()));
  return store;
}

void Datastore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RetrievalError("cannot write " + path.string());
  out << serialize();
  if (!out) throw RetrievalError("write failed: " + path.string());
}

Datastore Datastore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RetrievalError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

std::uint64_t Datastore::checksum() const { return fnv1a(serialize()); }

// --- search -----------------------------------------------------------------

void sort_hits(std::vector<Hit>& hits, const Datastore& store) {
  std::sort(hits.begin(), hits.end(), [&](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return store.entry(a.index).image_id < store.entry(b.index).image_id;
  });
}

KnnResult exact_knn(std::span<const double> query, const Datastore& store, std::size_t k) {
  KnnResult out;
  out.hits.reserve(store.size());
  for (std::uint32_t i = 0; i < store.size(); ++i) out.hits.push_back({i, relevance(query, store.entry(i).embedding)});
  sort_hits(out.hits, store);
  if (k > out.hits.size()) out.truncated = true;
  else out.hits.resize(k);
  return out;
}

RetrievalResult retrieve_captions(std::span<const double> query, const Datastore& store, const HnswIndex* index,
                                  const RetrievalConfig& cfg, std::optional<std::string_view> exclude_id) {
  cfg.validate();
  if (store.empty()) throw RetrievalError("retrieve_captions: empty datastore");
  // Every image holds at least one caption, so k images always cover k
  // captions; one extra slot absorbs the excluded image.
  const std::size_t width = std::min(store.size(), cfg.k + (exclude_id ? 1 : 0));
  std::vector<Hit> hits;
  if (cfg.exact) {
    hits = exact_knn(query, store, width).hits;
  } else {
    if (!index) throw RetrievalError("retrieve_captions: approximate search requested without an index");
    if (index->size() != store.size()) throw RetrievalError("retrieve_captions: index and datastore sizes differ");
    hits = index->search(query, width, std::max(cfg.ef_search, width));
    // Rescore in double so ties and ordering match the exact path.
    for (auto& h : hits) h.score = relevance(query, store.entry(h.index).embedding);
    sort_hits(hits, store);
  }

  RetrievalResult out;
  for (const auto& h : hits) {
    const auto& e = store.entry(h.index);
    if (exclude_id && e.image_id == *exclude_id) continue;
    if (cfg.k_unit == KUnit::kImages) {
      if (out.image_ids.size() == cfg.k) break;
      out.captions.insert(out.captions.end(), e.captions.begin(), e.captions.end());
    } else {
      if (out.captions.size() == cfg.k) break;
      const std::size_t take = std::min(e.captions.size(), cfg.k - out.captions.size());
      out.captions.insert(out.captions.end(), e.captions.begin(), e.captions.begin() + take);
    }
    out.image_ids.push_back(e.image_id);
  }
  out.short_result = cfg.k_unit == KUnit::kImages ? out.image_ids.size() < cfg.k : out.captions.size() < cfg.k;
  return out;
}

RetrievalResult retrieve_captions(const FeatureGrid& query, const Datastore& store, const HnswIndex* index,
                                  const RetrievalConfig& cfg, std::optional<std::string_view> exclude_id) {
  if (query.feature_dim() != store.dim() && !store.empty())
    throw RetrievalError("retrieve_captions: query feature dimension differs from the datastore");
  if (cfg.aggregation != store.aggregation())
    throw RetrievalError("retrieve_captions: config aggregation '" + to_string(cfg.aggregation) +
                         "' differs from the datastore's '" + to_string(store.aggregation()) + "'");
  const auto e = store.embed_query(query);
  return retrieve_captions(e, store, index, cfg, exclude_id);
}

// --- nearest-neighbour caption quality --------------------------------------

namespace {

struct CaptionScores {
  std::array<double, 6> v{};  // B1..B4, ROUGE-L, CIDEr-D
};

MetricRow to_row(const std::array<double, 6>& v) {
  MetricRow r;
  for (int n = 0; n < kMaxNgram; ++n) r.bleu[n] = v[n];
  r.rouge_l = v[4];
  r.cider_d = v[5];
  return r;
}

}  // namespace

std::vector<NnQualityRow> nn_quality_report(std::span<const NnQueryItem> queries, const Datastore& store,
                                            const HnswIndex* index, const RetrievalConfig& cfg,
                                            std::span<const std::size_t> ks, bool exclude_self) {
  if (ks.empty()) throw std::invalid_argument("nn_quality_report: no k values");
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  RetrievalConfig wide = cfg;
  wide.k = kmax;
  wide.ef_search = std::max(cfg.ef_search, kmax);

  std::vector<std::vector<std::string>> ref_sets;
  for (const auto& q : queries) ref_sets.push_back(q.references);
  const IdfTable idf = IdfTable::build(ref_sets);

  // Per query: scores of each retrieved caption, and how many captions the
  // first j images contribute (for k counted in images).
  struct Scored {
    std::vector<CaptionScores> captions;
    std::vector<std::size_t> image_ends;
  };
  std::vector<Scored> scored(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    auto res = retrieve_captions(q.embedding, store, index, wide,
                                 exclude_self ? std::optional<std::string_view>(q.image_id) : std::nullopt);
    const CiderScorer cider(q.references, idf);
    for (const auto& c : res.captions) {
      CaptionScores s;
      const auto b = bleu(c, q.references);
      std::copy(b.begin(), b.end(), s.v.begin());
      s.v[4] = rouge_l(c, q.references);
      s.v[5] = cider.score(c);
      scored[i].captions.push_back(s);
    }
    std::size_t end = 0;
    for (const auto& id : res.image_ids) {
      end += store.entry(*store.find(id)).captions.size();
      scored[i].image_ends.push_back(std::min(end, res.captions.size()));
    }
  }

  std::vector<NnQualityRow> rows;
  for (std::size_t k : ks) {
    NnQualityRow row;
    row.k = k;
    std::array<double, 6> mean{}, oracle{};
    std::size_t n_captions = 0;
    for (const auto& s : scored) {
      std::size_t take;
      if (cfg.k_unit == KUnit::kImages)
        take = s.image_ends.empty() ? 0 : s.image_ends[std::min(k, s.image_ends.size()) - 1];
      else
        take = std::min(k, s.captions.size());
      if (take == 0) {
        ++row.skipped;
        continue;
      }
      ++row.images;
      std::array<double, 6> best{};
      for (std::size_t j = 0; j < take; ++j)
        for (int m = 0; m < 6; ++m) {
          mean[m] += s.captions[j].v[m];
          best[m] = std::max(best[m], s.captions[j].v[m]);
        }
      n_captions += take;
      for (int m = 0; m < 6; ++m) oracle[m] += best[m];
    }
    for (int m = 0; m < 6; ++m) {
      if (n_captions) mean[m] /= static_cast<double>(n_captions);
      if (row.images) oracle[m] /= static_cast<double>(row.images);
    }
    row.mean = to_row(mean);
    row.oracle = to_row(oracle);
    rows.push_back(row);
  }
  return rows;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ratcap
