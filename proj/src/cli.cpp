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

#include "ratcap/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "ratcap/workflow.hpp"

namespace ratcap {
namespace {

namespace fs = std::filesystem;

// Options shared by every command that reads a run config.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("-c,--config", config, "run config file ([model] [train] [retrieval] [data])")->required();
    app->add_option("--set", overrides, "override a config value: section.key=value (repeatable)");
    app->add_option("--seed", seed, "shorthand for --set train.seed=N");
  }

  RunConfig load() const {
    RunConfig cfg = RunConfig::load(config);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed) cfg.set("train.seed", std::to_string(*seed));
    return cfg;
  }
};

// Decoded captions may hold broken UTF-8; it is replaced, not rejected.
std::string pretty(const nlohmann::json& j) {
  return j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
}

void write_json(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << pretty(j);
    return;
  }
  std::ofstream f(path);
  f << pretty(j);
  if (!f) throw CorpusError("cannot write " + path);
}

std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": cannot parse '" + part + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + ": empty list");
  return out;
}

std::string fixed(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// Config adjusted to a loaded checkpoint, plus the workspace around it.
struct CheckpointWorkspace {
  LoadedModel loaded;
  Workspace ws;
};

CheckpointWorkspace open_for_checkpoint(RunConfig cfg, const std::string& checkpoint, const std::string& split) {
  LoadedModel loaded = load_checkpoint(checkpoint);
  const ModelConfig& mc = loaded.model.config();
  cfg.set("retrieval.k", std::to_string(mc.k));
  cfg.set("model.max_len", std::to_string(mc.max_len));
  WorkspaceOptions opts;
  opts.splits = {split};
  opts.retrieval = mc.memory_mode != MemoryMode::kNone;
  if (loaded.tokenizer) opts.tokenizer = (fs::path(checkpoint).parent_path() / "tokenizer.bpe").string();
  Workspace ws = open_workspace(cfg, opts);
  if (ws.tokenizer.vocab_size() != mc.vocab_size)
    throw ConfigError("tokenizer has " + std::to_string(ws.tokenizer.vocab_size()) + " tokens but the checkpoint expects " +
                      std::to_string(mc.vocab_size));
  return {std::move(loaded), std::move(ws)};
}

nlohmann::json captions_json(const std::vector<Prediction>& preds) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : preds) arr.push_back({{"image_id", p.image_id}, {"caption", p.caption}, {"retrieved", p.retrieved}});
  return arr;
}

// --- commands ---------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t train = 4, val = 1, test = 1, captions = 5, feature_dim = 32, positions = 4;
  double noise = 0.1;
  std::uint64_t seed = 1234;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthSpec spec = SynthSpec::attributed_scenes();
  spec.splits = {{"train", a.train}, {"val", a.val}, {"test", a.test}};
  spec.captions_per_item = a.captions;
  spec.feature_dim = a.feature_dim;
  spec.grid_positions = a.positions;
  spec.noise = a.noise;
  spec.seed = a.seed;
  const auto paths = synth_write(spec, a.out);
  RunConfig cfg;
  nlohmann::json manifests;
  for (const auto& [split, path] : paths) {
    cfg.set("data." + split, fs::absolute(path).string());
    manifests[split] = path.string();
  }
  const fs::path config_path = fs::path(a.out) / "config.txt";
  std::ofstream(config_path) << cfg.to_text();
  nlohmann::json checksums;
  for (const auto& [split, path] : paths) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << ingest(path).checksum();
    checksums[split] = s.str();
  }
  out << pretty({{"manifests", manifests},
                 {"config", config_path.string()},
                 {"spec", spec.to_json()},
                 {"repro", {{"seed", a.seed}, {"corpus_checksums", checksums}, {"version", version()}}}});
  return kExitOk;
}

int cmd_build_index(const Common& c, const std::string& out_dir, std::ostream& out) {
  RunConfig cfg = c.load();
  WorkspaceOptions opts;
  const Workspace ws = open_workspace(cfg, opts);
  fs::create_directories(out_dir);
  const fs::path store_path = fs::path(out_dir) / "datastore.jsonl";
  ws.store->save(store_path);
  nlohmann::json files{{"datastore", store_path.string()}};
  if (ws.index) {
    const fs::path index_path = fs::path(out_dir) / "index.hnsw";
    ws.index->save(index_path);
    files["index"] = index_path.string();
  }
  ws.tokenizer.save(fs::path(out_dir) / "tokenizer.bpe");
  files["tokenizer"] = (fs::path(out_dir) / "tokenizer.bpe").string();
  const nlohmann::json summary{{"files", files},
                               {"entries", ws.store->size()},
                               {"dim", ws.store->dim()},
                               {"repro", ws.repro("build-index")}};
  std::ofstream(fs::path(out_dir) / "repro.json") << pretty(summary);
  out << pretty(summary);
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& out_dir, bool wallclock, std::ostream& out, std::ostream& err) {
  RunConfig cfg = c.load();
  WorkspaceOptions opts;
  opts.splits = {"val"};
  opts.retrieval = cfg.memory_mode() != MemoryMode::kNone;
  const Workspace ws = open_workspace(cfg, opts);
  const TrainRun run = run_training(ws, out_dir, wallclock);
  out << pretty(run.summary);
  if (run.result.aborted) {
    err << nlohmann::json{{"error", "numerical"}, {"message", run.result.abort_reason}, {"exit_code", kExitNumerical}}
               .dump()
        << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

struct GenerateArgs {
  std::string checkpoint, split = "test", out;
  bool exact = false;
  std::size_t beam = 3;
};

int cmd_generate(const Common& c, const GenerateArgs& a, std::ostream& out) {
  auto [loaded, ws] = open_for_checkpoint(c.load(), a.checkpoint, a.split);
  const auto r = generate_captions(loaded.model, ws, ws.split(a.split), a.exact, a.beam);
  const nlohmann::json j{{"repro", ws.repro("generate")},
                         {"checkpoint", a.checkpoint},
                         {"split", a.split},
                         {"exact_knn", a.exact},
                         {"beam", a.beam},
                         {"metrics", r.metrics.to_json()},
                         {"captions", captions_json(r.predictions)}};
  write_json(j, a.out, out);
  return kExitOk;
}

struct EvaluateArgs {
  std::string checkpoint, predictions, split = "val", out;
  bool exact = false;
  std::size_t beam = 1;
};

int cmd_evaluate(const Common& c, const EvaluateArgs& a, std::ostream& out) {
  if (a.checkpoint.empty() == a.predictions.empty())
    throw ConfigError("evaluate needs exactly one of --checkpoint or --predictions");
  nlohmann::json j;
  if (!a.checkpoint.empty()) {
    auto [loaded, ws] = open_for_checkpoint(c.load(), a.checkpoint, a.split);
    const auto r = generate_captions(loaded.model, ws, ws.split(a.split), a.exact, a.beam);
    j = {{"repro", ws.repro("evaluate")}, {"split", a.split}, {"beam", a.beam}, {"metrics", r.metrics.to_json()}};
  } else {
    const RunConfig cfg = c.load();
    const Corpus corpus = ingest(manifest_path(cfg.data(), a.split));
    std::ifstream in(a.predictions);
    if (!in) throw CorpusError("cannot read " + a.predictions);
    nlohmann::json preds;
    try {
      in >> preds;
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(a.predictions + ": invalid JSON: " + e.what());
    }
    // Either a generate output or a bare list of {image_id, caption}.
    const auto& list = preds.is_object() ? preds.at("captions") : preds;
    std::map<std::string, std::string> p;
    for (const auto& e : list) p[e.at("image_id").get<std::string>()] = e.at("caption").get<std::string>();
    std::map<std::string, std::vector<std::string>> refs;
    for (const auto& [id, caption] : p) {
      const CorpusItem* item = corpus.find(id);
      if (!item) throw CorpusError("prediction for unknown image '" + id + "' in split " + a.split);
      refs[id] = item->captions;
    }
    std::ostringstream sum;
    sum << std::hex << std::setw(16) << std::setfill('0') << corpus.checksum();
    j = {{"repro",
          {{"command", "evaluate"},
           {"seed", cfg.train().seed},
           {"corpus_checksums", {{a.split, sum.str()}}},
           {"version", version()}}},
         {"split", a.split},
         {"metrics", corpus_eval(p, refs).to_json()}};
  }
  write_json(j, a.out, out);
  return kExitOk;
}

int cmd_nn_report(const Common& c, const std::string& ks_text, const std::string& split, bool json, std::ostream& out) {
  const RunConfig cfg = c.load();
  const auto ks = parse_list(ks_text, "--k");
  RunConfig wide = cfg;
  wide.set("retrieval.k", std::to_string(*std::max_element(ks.begin(), ks.end())));
  if (wide.retrieval().ef_search < wide.retrieval().k) wide.set("retrieval.ef_search", std::to_string(wide.retrieval().k));
  WorkspaceOptions opts;
  opts.splits = {split};
  const Workspace ws = open_workspace(wide, opts);
  std::vector<NnQueryItem> queries;
  for (const auto& it : ws.split(split).items)
    queries.push_back({it.image_id(), ws.store->embed_query(it.features), it.captions});
  const auto rows =
      nn_quality_report(queries, *ws.store, ws.index ? &*ws.index : nullptr, wide.retrieval(), ks, true);
  if (json) {
    nlohmann::json arr = nlohmann::json::array();
    auto metric = [](const MetricRow& m) {
      return nlohmann::json{{"bleu1", m.bleu[0]}, {"bleu4", m.bleu[3]}, {"rouge_l", m.rouge_l}, {"cider_d", m.cider_d}};
    };
    for (const auto& r : rows)
      arr.push_back({{"k", r.k}, {"mean", metric(r.mean)}, {"oracle", metric(r.oracle)}, {"images", r.images}});
    out << pretty({{"repro", ws.repro("nn-report")}, {"split", split}, {"rows", arr}});
    return kExitOk;
  }
  out << "nearest-neighbour caption quality on " << split << " (" << queries.size() << " queries, "
      << (wide.retrieval().exact ? "exact" : "hnsw") << " search)\n";
  out << std::left << std::setw(6) << "k" << std::setw(38) << "mean: B-1 B-4 R C" << "oracle: B-1 B-4 R C\n";
  for (const auto& r : rows) {
    std::ostringstream mean, oracle;
    mean << fixed(r.mean.bleu[0]) << " " << fixed(r.mean.bleu[3]) << " " << fixed(r.mean.rouge_l) << " "
         << fixed(r.mean.cider_d);
    oracle << fixed(r.oracle.bleu[0]) << " " << fixed(r.oracle.bleu[3]) << " " << fixed(r.oracle.rouge_l) << " "
           << fixed(r.oracle.cider_d);
    out << std::left << std::setw(6) << r.k << std::setw(38) << mean.str() << oracle.str() << "\n";
  }
  out << "config_hash " << ws.repro("nn-report")["config_hash"].get<std::string>() << "\n";
  return kExitOk;
}

struct AblateArgs {
  bool no_gate = false, no_memory = false;
  std::vector<std::string> sweeps;
  std::string seeds = "1,2,3";
  std::string json;
};

int cmd_ablate(const Common& c, const AblateArgs& a, std::ostream& out) {
  const RunConfig base = c.load();
  std::vector<AblationVariant> variants{{"retrieval-augmented", {}}};
  if (a.no_gate) variants.push_back({"no gate", {"model.memory_mode=sequential"}});
  if (a.no_memory) variants.push_back({"no memory", {"model.memory_mode=none"}});
  for (const auto& s : a.sweeps) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--sweep '" + s + "' needs key=v1,v2,...");
    const std::string key = s.substr(0, eq);
    std::stringstream ss(s.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) variants.push_back({key + "=" + v, {key + "=" + v}});
  }
  std::vector<std::uint64_t> seeds;
  for (auto s : parse_list(a.seeds, "--seeds")) seeds.push_back(s);
  const auto rows = run_ablation(base, variants, seeds);

  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) arr.push_back(r.to_json());
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << base.hash();
  const nlohmann::json j{
      {"repro", {{"command", "ablate"}, {"seeds", seeds}, {"config_hash", hash.str()}, {"version", version()}}},
      {"rows", arr}};
  if (!a.json.empty()) write_json(j, a.json, out);
  out << std::left << std::setw(28) << "variant" << std::setw(12) << "CIDEr-D" << std::setw(12) << "BLEU-4"
      << std::setw(12) << "ROUGE-L" << "val XE\n";
  for (const auto& r : rows)
    out << std::left << std::setw(28) << r.variant << std::setw(12) << fixed(r.median_cider) << std::setw(12)
        << fixed(r.median_bleu4) << std::setw(12) << fixed(r.median_rouge_l) << fixed(r.median_val_loss) << "\n";
  out << "medians over seeds " << a.seeds << "; config_hash " << hash.str() << "\n";
  return kExitOk;
}

void report(std::ostream& err, const char* kind, const std::string& message, int code) {
  err << nlohmann::json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ratcap: retrieval-augmented image captioning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write the synthetic attributed-scenes corpus");
  s->add_option("-o,--out", synth.out, "output directory")->required();
  s->add_option("--train", synth.train, "train items per attribute combination");
  s->add_option("--val", synth.val, "val items per attribute combination");
  s->add_option("--test", synth.test, "test items per attribute combination");
  s->add_option("--captions", synth.captions, "captions per item");
  s->add_option("--feature-dim", synth.feature_dim, "feature dimension");
  s->add_option("--positions", synth.positions, "grid positions per image");
  s->add_option("--noise", synth.noise, "feature noise scale");
  s->add_option("--synth-seed", synth.seed, "generator seed");

  Common bi_c;
  std::string bi_out;
  auto* bi = app.add_subcommand("build-index", "build the datastore and HNSW index from the train split");
  bi_c.add(bi);
  bi->add_option("-o,--out", bi_out, "output directory")->required();

  Common tr_c;
  std::string tr_out;
  bool no_wallclock = false;
  auto* tr = app.add_subcommand("train", "cross-entropy then self-critical training");
  tr_c.add(tr);
  tr->add_option("-o,--out", tr_out, "output directory")->required();
  tr->add_flag("--no-wallclock", no_wallclock, "omit wallclock times from the log (byte-identical logs)");

  Common ge_c;
  GenerateArgs ge;
  auto* g = app.add_subcommand("generate", "caption a split with a trained checkpoint");
  ge_c.add(g);
  g->add_option("--checkpoint", ge.checkpoint, "model checkpoint")->required();
  g->add_option("--split", ge.split, "train, val or test");
  g->add_option("--beam", ge.beam, "beam size (1 = greedy)");
  g->add_flag("--exact-knn", ge.exact, "exact nearest-neighbour search instead of HNSW");
  g->add_option("-o,--out", ge.out, "output file (default stdout)");

  Common ev_c;
  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "BLEU, ROUGE-L and CIDEr-D of a checkpoint or a captions file");
  ev_c.add(e);
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  e->add_option("--predictions", ev.predictions, "captions JSON from generate");
  e->add_option("--split", ev.split, "train, val or test");
  e->add_option("--beam", ev.beam, "beam size (1 = greedy)");
  e->add_flag("--exact-knn", ev.exact, "exact nearest-neighbour search instead of HNSW");
  e->add_option("-o,--out", ev.out, "output file (default stdout)");

  Common nn_c;
  std::string nn_k = "5,10,20,40", nn_split = "val";
  bool nn_json = false;
  auto* nn = app.add_subcommand("nn-report", "quality of retrieved captions against ground truth");
  nn_c.add(nn);
  nn->add_option("--k", nn_k, "comma-separated k values");
  nn->add_option("--split", nn_split, "query split");
  nn->add_flag("--json", nn_json, "JSON instead of a table");

  Common ab_c;
  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "train variants with identical seeds and compare");
  ab_c.add(abl);
  abl->add_flag("--no-gate", ab.no_gate, "add the ungated (sequential memory attention) variant");
  abl->add_flag("--no-memory", ab.no_memory, "add the variant without external memory");
  abl->add_option("--sweep", ab.sweeps, "section.key=v1,v2,... (repeatable)");
  abl->add_option("--seeds", ab.seeds, "comma-separated seeds");
  abl->add_option("--json", ab.json, "also write the full results here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    report(err, "usage", ex.what(), kExitUsage);
    return kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*bi) return cmd_build_index(bi_c, bi_out, out);
    if (*tr) return cmd_train(tr_c, tr_out, !no_wallclock, out, err);
    if (*g) return cmd_generate(ge_c, ge, out);
    if (*e) return cmd_evaluate(ev_c, ev, out);
    if (*nn) return cmd_nn_report(nn_c, nn_k, nn_split, nn_json, out);
    if (*abl) return cmd_ablate(ab_c, ab, out);
  } catch (const ConfigError& ex) {
    report(err, "usage", ex.what(), kExitUsage);
    return kExitUsage;
  } catch (const NumericalAbort& ex) {
    report(err, "numerical", ex.what(), kExitNumerical);
    return kExitNumerical;
  } catch (const std::exception& ex) {
    report(err, "data", ex.what(), kExitData);
    return kExitData;
  }
  report(err, "usage", "no command", kExitUsage);
  return kExitUsage;
}

}  // namespace ratcap
