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

#include "ratcap/corpus.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ratcap/random.hpp"
#include "ratcap/tokenizer.hpp"

namespace ratcap {

namespace {

constexpr char kGridMagic[] = "RGRID1";
constexpr std::size_t kGridMagicLen = 6;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

float round_f32(double v) { return static_cast<float>(v); }

}  // namespace

std::size_t Corpus::caption_count() const {
  std::size_t n = 0;
  for (const auto& it : items) n += it.captions.size();
  return n;
}

const CorpusItem* Corpus::find(const std::string& image_id) const {
  for (const auto& it : items)
    if (it.image_id() == image_id) return &it;
  return nullptr;
}

std::uint64_t Corpus::checksum() const {
  std::uint64_t h = fnv1a(split);
  for (const auto& it : items) {
    h = fnv1a(it.image_id(), h);
    for (const auto& c : it.captions) h = fnv1a(std::string_view(c.data(), c.size() + 1), h);
    std::string bytes;
    put_u32(bytes, static_cast<std::uint32_t>(it.features.positions()));
    put_u32(bytes, static_cast<std::uint32_t>(it.features.feature_dim()));
    for (double v : it.features.grid.data()) put_u32(bytes, std::bit_cast<std::uint32_t>(round_f32(v)));
    h = fnv1a(bytes, h);
  }
  return h;
}

void Corpus::validate() const {
  std::set<std::string> seen;
  for (const auto& it : items) {
    if (it.image_id().empty()) throw CorpusError(split + ": item with empty image_id");
    if (!seen.insert(it.image_id()).second) throw CorpusError(split + ": duplicate image_id '" + it.image_id() + "'");
    if (it.captions.empty()) throw CorpusError(split + ": image '" + it.image_id() + "' has no captions");
    if (it.features.grid.dim() != 2 || it.features.positions() == 0)
      throw CorpusError(split + ": image '" + it.image_id() + "' has an empty feature grid");
    if (it.features.feature_dim() != feature_dim)
      throw CorpusError(split + ": image '" + it.image_id() + "' has feature dim " +
                        std::to_string(it.features.feature_dim()) + ", manifest says " + std::to_string(feature_dim));
  }
}

void write_grid_file(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.dim() != 2) throw CorpusError("write_grid_file: grid must be a matrix");
  std::string out(kGridMagic, kGridMagicLen);
  put_u32(out, static_cast<std::uint32_t>(grid.rows()));
  put_u32(out, static_cast<std::uint32_t>(grid.cols()));
  for (double v : grid.data()) put_u32(out, std::bit_cast<std::uint32_t>(round_f32(v)));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CorpusError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CorpusError("write failed: " + path.string());
}

Tensor read_grid_file(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < kGridMagicLen + 8 || bytes.compare(0, kGridMagicLen, kGridMagic) != 0)
    throw CorpusError(path.string() + ": not an RGRID1 file");
  const std::uint32_t rows = get_u32(bytes, kGridMagicLen), cols = get_u32(bytes, kGridMagicLen + 4);
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  if (rows == 0 || cols == 0) throw CorpusError(path.string() + ": empty grid");
  if (bytes.size() != kGridMagicLen + 8 + 4 * n)
    throw CorpusError(path.string() + ": size does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(get_u32(bytes, kGridMagicLen + 8 + 4 * i));
  return Tensor::matrix(rows, cols, std::move(v));
}

Corpus ingest(const std::filesystem::path& manifest) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(manifest.string() + ": invalid JSON: " + e.what());
  }
  Corpus c;
  try {
    if (j.value("format", "") != "ratcap-manifest") throw CorpusError(manifest.string() + ": not a ratcap manifest");
    if (j.value("version", 0) != 1) throw CorpusError(manifest.string() + ": unsupported manifest version");
    c.split = j.at("split").get<std::string>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.normalization = j.value("normalization", "none");
    const auto base = manifest.parent_path();
    for (const auto& item : j.at("items")) {
      CorpusItem it;
      it.features.image_id = item.at("image_id").get<std::string>();
      if (item.contains("feature_file")) {
        std::filesystem::path p = item.at("feature_file").get<std::string>();
        if (p.is_relative()) p = base / p;
        if (!std::filesystem::exists(p))
          throw CorpusError("image '" + it.image_id() + "': missing feature file " + p.string());
        it.features.grid = read_grid_file(p);
      } else if (item.contains("grid")) {
        const auto rows = item.at("grid").get<std::vector<std::vector<double>>>();
        if (rows.empty()) throw CorpusError("image '" + it.image_id() + "': empty inline grid");
        std::vector<double> flat;
        for (const auto& r : rows) {
          if (r.size() != rows[0].size()) throw CorpusError("image '" + it.image_id() + "': ragged inline grid");
          for (double v : r) flat.push_back(round_f32(v));
        }
        it.features.grid = Tensor::matrix(rows.size(), rows[0].size(), std::move(flat));
      } else {
        throw CorpusError("image '" + it.image_id() + "': needs feature_file or grid");
      }
      for (const auto& cap : item.at("captions").get<std::vector<std::string>>()) {
        it.captions.push_back(normalize_text(cap));
        if (it.captions.back().empty()) throw CorpusError("image '" + it.image_id() + "': empty caption");
      }
      c.items.push_back(std::move(it));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorpusError(manifest.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::filesystem::path save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  corpus.validate();
  const auto feat_dir = dir / "features" / corpus.split;
  std::filesystem::create_directories(feat_dir);
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    const auto& it = corpus.items[i];
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".rgrid";
    write_grid_file(feat_dir / name.str(), it.features.grid);
    items.push_back({{"image_id", it.image_id()},
                     {"feature_file", (std::filesystem::path("features") / corpus.split / name.str()).generic_string()},
                     {"captions", it.captions}});
  }
  const nlohmann::json j{{"format", "ratcap-manifest"},
                         {"version", 1},
                         {"split", corpus.split},
                         {"feature_dim", corpus.feature_dim},
                         {"normalization", corpus.normalization},
                         {"items", items}};
  const auto path = dir / (corpus.split + ".json");
  std::ofstream f(path);
  if (!f) throw CorpusError("cannot write " + path.string());
  f << j.dump(1) << "\n";
  return path;
}

std::map<std::string, std::vector<std::string>> references_of(const Corpus& corpus) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& it : corpus.items) out[it.image_id()] = it.captions;
  return out;
}

Datastore build_datastore(const Corpus& corpus, Aggregation aggregation, bool normalize) {
  if (corpus.split != "train")
    throw CorpusError("the datastore is built from the train split only (got '" + corpus.split + "')");
  Datastore store(aggregation, normalize);
  for (const auto& it : corpus.items) store.add(it.features, it.captions);
  return store;
}

// --- synthetic scenes -------------------------------------------------------

SynthSpec SynthSpec::attributed_scenes() {
  SynthSpec s;
  s.axes = {
      {"color", {{"red", "crimson"}, {"blue"}, {"green"}, {"yellow", "golden"}, {"white"}, {"black", "dark"}}},
      {"object", {{"dog", "puppy"}, {"cat", "kitten"}, {"car"}, {"bird"}, {"horse", "pony"}, {"boat"}}},
      {"place", {{"park", "garden"}, {"street", "road"}, {"beach"}, {"kitchen"}}},
  };
  return s;
}

void SynthSpec::validate() const {
  if (axes.empty()) throw CorpusError("synth: at least one attribute axis is required");
  for (const auto& a : axes) {
    if (a.values.empty()) throw CorpusError("synth: axis '" + a.name + "' has no values");
    for (const auto& v : a.values)
      if (v.empty()) throw CorpusError("synth: axis '" + a.name + "' has a value without words");
  }
  if (splits.empty()) throw CorpusError("synth: no splits");
  for (const auto& [name, n] : splits)
    if (name.empty() || n == 0) throw CorpusError("synth: split '" + name + "' needs at least one item per combination");
  if (captions_per_item == 0 || feature_dim == 0 || grid_positions == 0)
    throw CorpusError("synth: captions_per_item, feature_dim and grid_positions must be positive");
  if (noise < 0.0) throw CorpusError("synth: noise must be non-negative");
}

std::size_t SynthSpec::combinations() const {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.values.size();
  return n;
}

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json ax = nlohmann::json::array();
  for (const auto& a : axes) ax.push_back({{"name", a.name}, {"values", a.values}});
  nlohmann::json sp = nlohmann::json::array();
  for (const auto& [name, n] : splits) sp.push_back({{"name", name}, {"items_per_combination", n}});
  return {{"axes", ax},
          {"splits", sp},
          {"captions_per_item", captions_per_item},
          {"feature_dim", feature_dim},
          {"grid_positions", grid_positions},
          {"noise", noise},
          {"seed", seed}};
}

std::vector<std::string> synth_attributes(const SynthSpec& spec, std::size_t combination) {
  std::vector<std::string> out(spec.axes.size());
  for (std::size_t a = spec.axes.size(); a-- > 0;) {
    const auto& vals = spec.axes[a].values;
    out[a] = vals[combination % vals.size()][0];
    combination /= vals.size();
  }
  return out;
}

namespace {

// Attribute word choices for one caption: a synonym per axis.
std::vector<std::string> pick_words(const SynthSpec& spec, std::size_t combination, std::mt19937_64& rng) {
  std::vector<std::string> out(spec.axes.size());
  for (std::size_t a = spec.axes.size(); a-- > 0;) {
    const auto& vals = spec.axes[a].values;
    const auto& syn = vals[combination % vals.size()];
    out[a] = syn[uniform_index(rng, syn.size())];
    combination /= vals.size();
  }
  return out;
}

std::string render_caption(const std::vector<std::string>& w, std::size_t tmpl) {
  // Three-axis templates; other axis counts fall back to a plain list.
  if (w.size() != 3) {
    std::string s = "a";
    for (const auto& x : w) s += " " + x;
    return s;
  }
  const auto& c = w[0];
  const auto& o = w[1];
  const auto& p = w[2];
  switch (tmpl % 5) {
    case 0: return "a " + c + " " + o + " in the " + p;
    case 1: return "there is a " + c + " " + o + " in the " + p;
    case 2: return "a " + o + " that is " + c + " standing in the " + p;
    case 3: return "the " + c + " " + o + " is in the " + p;
    default: return "a photo of a " + c + " " + o + " at the " + p;
  }
}

}  // namespace

std::map<std::string, Corpus> synth_generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t combos = spec.combinations();
  const std::size_t dim = spec.feature_dim, pos = spec.grid_positions;

  std::vector<std::vector<double>> directions(combos);
  for (std::size_t c = 0; c < combos; ++c) {
    auto rng = derived_rng(spec.seed, c);
    auto& d = directions[c];
    d.resize(dim);
    for (auto& x : d) x = standard_normal(rng);
    normalize_in_place(d);
  }

  std::map<std::string, Corpus> out;
  for (std::size_t s = 0; s < spec.splits.size(); ++s) {
    const auto& [name, per_combo] = spec.splits[s];
    Corpus corpus;
    corpus.split = name;
    corpus.feature_dim = dim;
    auto rng = derived_rng(spec.seed, 0x5eed0000ULL + s);
    for (std::size_t c = 0; c < combos; ++c) {
      for (std::size_t r = 0; r < per_combo; ++r) {
        CorpusItem it;
        std::ostringstream id;
        id << name << "-" << std::setw(4) << std::setfill('0') << c << "-" << std::setw(2) << r;
        it.features.image_id = id.str();
        std::vector<double> g(pos * dim);
        for (std::size_t p = 0; p < pos; ++p)
          for (std::size_t k = 0; k < dim; ++k)
            g[p * dim + k] = round_f32(directions[c][k] + spec.noise * standard_normal(rng));
        it.features.grid = Tensor::matrix(pos, dim, std::move(g));
        const std::size_t first = uniform_index(rng, 5);
        for (std::size_t k = 0; k < spec.captions_per_item; ++k)
          it.captions.push_back(render_caption(pick_words(spec, c, rng), first + k));
        corpus.items.push_back(std::move(it));
      }
    }
    out[name] = std::move(corpus);
  }
  return out;
}

std::map<std::string, std::filesystem::path> synth_write(const SynthSpec& spec, const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  for (const auto& [name, corpus] : synth_generate(spec)) out[name] = save_corpus(corpus, dir);
  std::ofstream f(dir / "synth_spec.json");
  f << spec.to_json().dump(1) << "\n";
  return out;
}

}  // namespace ratcap
