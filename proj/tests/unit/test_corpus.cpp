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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ratcap/corpus.hpp"
#include "ratcap/tokenizer.hpp"

namespace ratcap {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

fs::path write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path) << j.dump(1);
  return path;
}

nlohmann::json two_item_manifest() {
  return {{"format", "ratcap-manifest"},
          {"version", 1},
          {"split", "train"},
          {"feature_dim", 3},
          {"items",
           {{{"image_id", "a"}, {"feature_file", "a.rgrid"}, {"captions", {"a red dog", "a dog"}}},
            {{"image_id", "b"}, {"grid", {{1.0, 0.0, 0.5}, {0.0, 1.0, 0.25}}}, {"captions", {"A  Cat."}}}}}};
}

std::string error_of(const fs::path& manifest) {
  try {
    ingest(manifest);
  } catch (const CorpusError& e) {
    return e.what();
  }
  return "";
}

TEST(Ingest, TwoItemManifest) {
  TempDir dir("ratcap_ingest_two");
  write_grid_file(dir.path() / "a.rgrid", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  const Corpus c = ingest(write_json(dir.path() / "m.json", two_item_manifest()));
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.caption_count(), 3u);
  EXPECT_EQ(c.split, "train");
  EXPECT_EQ(c.items[0].features.grid.at(0, 2), 2.0);
  EXPECT_EQ(c.items[1].features.positions(), 2u);
  EXPECT_EQ(c.find("b")->captions[0], normalize_text("A  Cat."));
  EXPECT_EQ(c.find("b")->captions[0], "a cat");
  EXPECT_EQ(c.find("zzz"), nullptr);
}

TEST(Ingest, DuplicateIdIsNamed) {
  TempDir dir("ratcap_ingest_dup");
  auto j = two_item_manifest();
  j["items"][1]["image_id"] = "a";
  write_grid_file(dir.path() / "a.rgrid", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  const auto msg = error_of(write_json(dir.path() / "m.json", j));
  EXPECT_NE(msg.find("duplicate"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'a'"), std::string::npos) << msg;
}

TEST(Ingest, MissingFileIsNamed) {
  TempDir dir("ratcap_ingest_missing");
  const auto msg = error_of(write_json(dir.path() / "m.json", two_item_manifest()));
  EXPECT_NE(msg.find("missing feature file"), std::string::npos) << msg;
  EXPECT_NE(msg.find("a.rgrid"), std::string::npos) << msg;
}

TEST(Ingest, DimMismatchIsNamed) {
  TempDir dir("ratcap_ingest_dim");
  write_grid_file(dir.path() / "a.rgrid", Tensor::matrix(1, 4, {0.5, -1.0, 2.0, 3.0}));
  const auto msg = error_of(write_json(dir.path() / "m.json", two_item_manifest()));
  EXPECT_NE(msg.find("feature dim"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'a'"), std::string::npos) << msg;
}

TEST(Ingest, RejectsOtherFormats) {
  TempDir dir("ratcap_ingest_format");
  auto j = two_item_manifest();
  j["format"] = "coco";
  EXPECT_NE(error_of(write_json(dir.path() / "m.json", j)).find("not a ratcap manifest"), std::string::npos);
  std::ofstream(dir.path() / "bad.json") << "{";
  EXPECT_NE(error_of(dir.path() / "bad.json").find("invalid JSON"), std::string::npos);
  std::ofstream(dir.path() / "bad.rgrid") << "RGRID0";
  EXPECT_THROW(read_grid_file(dir.path() / "bad.rgrid"), CorpusError);
}

TEST(Ingest, PersistRoundtripKeepsChecksum) {
  TempDir dir("ratcap_ingest_roundtrip");
  write_grid_file(dir.path() / "a.rgrid", Tensor::matrix(1, 3, {0.5, -1.0, 2.0}));
  const Corpus first = ingest(write_json(dir.path() / "m.json", two_item_manifest()));
  const Corpus second = ingest(save_corpus(first, dir.path() / "copy"));
  EXPECT_EQ(first.checksum(), second.checksum());
  const Corpus third = ingest(save_corpus(second, dir.path() / "copy2"));
  EXPECT_EQ(third.checksum(), first.checksum());

  Corpus changed = first;
  changed.items[0].captions[1] = "a dogs";
  EXPECT_NE(changed.checksum(), first.checksum());
}

TEST(GridFile, StoresFloat32) {
  TempDir dir("ratcap_grid");
  write_grid_file(dir.path() / "g.rgrid", Tensor::matrix(2, 2, {0.1, 1.0, -3.5, 1e-3}));
  const Tensor g = read_grid_file(dir.path() / "g.rgrid");
  EXPECT_EQ(g.at(0, 0), static_cast<double>(0.1f));
  EXPECT_EQ(g.at(1, 0), -3.5);
  EXPECT_EQ(fs::file_size(dir.path() / "g.rgrid"), 6u + 8u + 16u);
}

TEST(Datastore, TrainSplitOnly) {
  SynthSpec spec;
  spec.axes = {{"color", {{"red"}, {"blue"}}}, {"object", {{"dog"}, {"cat"}}}};
  const auto corpora = synth_generate(spec);
  EXPECT_EQ(build_datastore(corpora.at("train"), Aggregation::kMean, false).size(), 16u);
  EXPECT_THROW(build_datastore(corpora.at("test"), Aggregation::kMean, false), CorpusError);
}

double dot(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

SynthSpec three_by_three(std::size_t per_split, double noise) {
  SynthSpec spec;
  spec.axes = {{"color", {{"red"}, {"blue"}, {"green"}}}, {"object", {{"dog", "puppy"}, {"cat"}, {"car"}}}};
  spec.splits = {{"train", per_split}};
  spec.noise = noise;
  return spec;
}

TEST(Synth, Counts) {
  const auto corpora = synth_generate(three_by_three(20, 0.1));
  const Corpus& c = corpora.at("train");
  EXPECT_EQ(c.size(), 180u);
  EXPECT_EQ(c.caption_count(), 900u);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(SynthSpec::attributed_scenes().combinations(), 144u);
}

TEST(Synth, Deterministic) {
  const auto a = synth_generate(three_by_three(2, 0.1));
  const auto b = synth_generate(three_by_three(2, 0.1));
  EXPECT_EQ(a.at("train").checksum(), b.at("train").checksum());
  auto other = three_by_three(2, 0.1);
  other.seed = 99;
  EXPECT_NE(synth_generate(other).at("train").checksum(), a.at("train").checksum());
}

TEST(Synth, CaptionsNameTheAttributes) {
  const auto spec = SynthSpec::attributed_scenes();
  const auto corpora = synth_generate(spec);
  const Corpus& c = corpora.at("val");
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto attrs = synth_attributes(spec, i);  // one val item per combination
    for (const auto& cap : c.items[i].captions) {
      for (std::size_t a = 0; a < attrs.size(); ++a) {
        bool found = false;
        for (const auto& v : spec.axes[a].values)
          if (v[0] == attrs[a])
            for (const auto& word : v) found = found || cap.find(word) != std::string::npos;
        EXPECT_TRUE(found) << cap << " lacks " << attrs[a];
      }
    }
  }
}

TEST(Synth, NoiseFreeTwinsShareEmbeddings) {
  const auto corpora = synth_generate(three_by_three(2, 0.0));
  const Corpus& c = corpora.at("train");
  const Datastore store = build_datastore(c, Aggregation::kMean, false);
  // Items 2c and 2c + 1 share combination c.
  const auto& e = store.entries();
  for (std::size_t i = 0; i + 1 < e.size(); i += 2) {
    EXPECT_EQ(e[i].embedding, e[i + 1].embedding);
    const double self = dot(e[i].embedding, e[i + 1].embedding);
    for (std::size_t j = 0; j < e.size(); ++j)
      if (j / 2 != i / 2) EXPECT_LT(dot(e[i].embedding, e[j].embedding), self);
  }
}

TEST(Synth, SameAttributeItemRetrievedFirst) {
  const auto corpora = synth_generate(three_by_three(20, 0.1));
  const Corpus& c = corpora.at("train");
  const Datastore store = build_datastore(c, Aggregation::kMean, false);
  RetrievalConfig rc;
  rc.k = 1;
  rc.exact = true;
  rc.k_unit = KUnit::kImages;
  std::size_t hits = 0;
  for (const auto& item : c.items) {
    const auto r = retrieve_captions(item.features, store, nullptr, rc, item.image_id());
    ASSERT_EQ(r.image_ids.size(), 1u);
    // Ids are "<split>-<combination>-<replica>".
    hits += r.image_ids[0].substr(0, 10) == item.image_id().substr(0, 10);
  }
  EXPECT_GE(static_cast<double>(hits) / static_cast<double>(c.size()), 0.9);
}

TEST(Synth, RejectsBadSpecs) {
  auto spec = three_by_three(1, 0.1);
  spec.axes.clear();
  EXPECT_THROW(spec.validate(), CorpusError);
  spec = three_by_three(1, -1.0);
  EXPECT_THROW(spec.validate(), CorpusError);
  spec = three_by_three(0, 0.1);
  EXPECT_THROW(spec.validate(), CorpusError);
}

}  // namespace
}  // namespace ratcap
