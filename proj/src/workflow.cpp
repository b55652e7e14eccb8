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

#include "ratcap/workflow.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#ifndef RATCAP_VERSION
#define RATCAP_VERSION "unknown"
#endif

namespace ratcap {

std::string version() { return RATCAP_VERSION; }

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw CorpusError("cannot write " + path.string());
}

}  // namespace

std::filesystem::path manifest_path(const DataConfig& data, const std::string& split) {
  const std::string* p = nullptr;
  if (split == "train") p = &data.train;
  if (split == "val") p = &data.val;
  if (split == "test") p = &data.test;
  if (!p) throw ConfigError("unknown split '" + split + "' (train, val or test)");
  if (p->empty()) throw ConfigError("data." + split + " is not set");
  return *p;
}

const Corpus& Workspace::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw CorpusError("split '" + name + "' is not loaded");
  return it->second;
}

ModelConfig Workspace::model_config() const {
  RunConfig c = config;
  const std::size_t dim = split("train").feature_dim;
  const auto& m = c.values()["model"];
  if (m["feat_dim"].get<std::size_t>() != 0 && m["feat_dim"].get<std::size_t>() != dim)
    throw ConfigError("model.feat_dim=" + m["feat_dim"].dump() + " but the corpus has feature dim " +
                      std::to_string(dim));
  c.set("model.feat_dim", std::to_string(dim));
  c.set("model.vocab_size", std::to_string(tokenizer.vocab_size()));
  c.set("model.k", std::to_string(c.retrieval().k));
  return c.model();
}

TrainerInputs Workspace::trainer_inputs() const {
  const auto v = splits.find("val");
  const bool memory = config.memory_mode() != MemoryMode::kNone;
  return {&split("train"),
          v == splits.end() ? nullptr : &v->second,
          &tokenizer,
          memory && store ? &*store : nullptr,
          memory && index ? &*index : nullptr,
          config.retrieval()};
}

MemoryProvider Workspace::memory(bool exact) const {
  RetrievalConfig rc = config.retrieval();
  if (exact) rc.exact = true;
  return MemoryProvider(store ? &*store : nullptr, rc.exact || !index ? nullptr : &*index, rc, &tokenizer);
}

nlohmann::json Workspace::repro(const std::string& command) const {
  nlohmann::json sums = nlohmann::json::object();
  for (const auto& [name, c] : splits) sums[name] = hex64(c.checksum());
  nlohmann::json r{{"command", command},
                   {"seed", config.train().seed},
                   {"config_hash", hex64(config.hash())},
                   {"corpus_checksums", sums},
                   {"tokenizer_checksum", hex64(fnv1a(tokenizer.serialize()))},
                   {"version", version()}};
  if (store) r["datastore_checksum"] = hex64(store->checksum());
  if (index) r["index_checksum"] = hex64(index->checksum());
  return r;
}

Workspace open_workspace(const RunConfig& config, const WorkspaceOptions& options) {
  Workspace ws;
  ws.config = config;
  const DataConfig data = config.data();
  const ModelConfig raw = [&] {
    // feat_dim comes from the corpus; validate everything else now.
    RunConfig c = config;
    if (c.values()["model"]["feat_dim"].get<std::size_t>() == 0) c.set("model.feat_dim", "1");
    return c.model();
  }();
  const RetrievalConfig rc = config.retrieval();
  config.train();

  ws.splits["train"] = ingest(manifest_path(data, "train"));
  for (const auto& s : options.splits)
    if (s != "train") ws.splits[s] = ingest(manifest_path(data, s));
  for (const auto& [name, c] : ws.splits)
    if (c.feature_dim != ws.splits["train"].feature_dim)
      throw CorpusError("split '" + name + "' has feature dim " + std::to_string(c.feature_dim) +
                        ", train has " + std::to_string(ws.splits["train"].feature_dim));

  const std::string tok = options.tokenizer.empty() ? data.tokenizer : options.tokenizer;
  if (!tok.empty()) {
    ws.tokenizer = BpeTokenizer::load(tok, raw.max_len);
  } else {
    std::vector<std::string> texts;
    for (const auto& it : ws.split("train").items) texts.insert(texts.end(), it.captions.begin(), it.captions.end());
    ws.tokenizer = train_bpe(texts, data.bpe_vocab ? data.bpe_vocab : raw.vocab_size, raw.max_len).tokenizer;
  }

  if (options.retrieval) {
    if (!data.datastore.empty()) {
      ws.store = Datastore::load(data.datastore);
      if (ws.store->aggregation() != rc.aggregation || ws.store->normalized() != rc.normalize)
        throw ConfigError("datastore " + data.datastore + " was built with different aggregation/normalization");
    } else {
      ws.store = build_datastore(ws.split("train"), rc.aggregation, rc.normalize);
    }
    if (!rc.exact) {
      if (!data.index.empty()) {
        ws.index = HnswIndex::load(data.index);
        if (ws.index->size() != ws.store->size())
          throw CorpusError("index " + data.index + " does not match the datastore");
      } else {
        ws.index = HnswIndex::build(*ws.store, HnswParams{rc.M, rc.ef_construction, rc.seed});
      }
    }
  }
  return ws;
}

LoadedModel load_checkpoint(const std::filesystem::path& checkpoint) {
  if (!std::filesystem::exists(checkpoint)) throw CorpusError("checkpoint not found: " + checkpoint.string());
  LoadedModel out{Captioner::load(checkpoint), std::nullopt};
  const auto tok = checkpoint.parent_path() / "tokenizer.bpe";
  if (std::filesystem::exists(tok)) out.tokenizer = BpeTokenizer::load(tok, out.model.config().max_len);
  return out;
}

GenerateResult generate_captions(const Captioner& model, const Workspace& ws, const Corpus& items, bool exact,
                                 std::size_t beam) {
  if (items.feature_dim != model.config().feat_dim)
    throw CorpusError("corpus feature dim " + std::to_string(items.feature_dim) + " does not match the model (" +
                      std::to_string(model.config().feat_dim) + ")");
  GenerateResult r;
  MemoryProvider mp = model.config().memory_mode == MemoryMode::kNone
                          ? MemoryProvider(nullptr, nullptr, ws.config.retrieval(), &ws.tokenizer)
                          : ws.memory(exact);
  r.metrics = evaluate_model(model, items.items, mp, ws.tokenizer, beam, &r.predictions);
  return r;
}

TrainRun run_training(const Workspace& ws, const std::filesystem::path& out_dir, bool log_wallclock) {
  std::filesystem::create_directories(out_dir);
  TrainRun run;
  run.checkpoint = out_dir / "model.ckpt";
  ws.tokenizer.save(out_dir / "tokenizer.bpe");
  RunConfig resolved = ws.config;
  resolved.set("data.tokenizer", (out_dir / "tokenizer.bpe").string());
  write_text(out_dir / "config.txt", resolved.to_text());

  std::ofstream log(out_dir / "log.jsonl");
  PipelineOptions opts;
  opts.log = &log;
  opts.checkpoint = run.checkpoint;
  opts.log_wallclock = log_wallclock;
  run.result = train_pipeline(ws.model_config(), ws.config.train(), ws.trainer_inputs(), opts);
  // The pipeline writes on improvement; make sure a checkpoint exists.
  if (!std::filesystem::exists(run.checkpoint)) run.result.best->save(run.checkpoint);

  const auto& r = run.result;
  run.summary = {{"repro", ws.repro("train")},
                 {"checkpoint", run.checkpoint.string()},
                 {"checkpoint_checksum", hex64(Captioner::load(run.checkpoint).checksum())},
                 {"xe_steps", r.xe_steps},
                 {"scst_steps", r.scst_steps},
                 {"xe_val", r.xe_val.to_json()},
                 {"xe_val_loss", r.xe_val_loss},
                 {"final_val", r.final_val.to_json()},
                 {"best_val_cider", r.best_val_cider},
                 {"gate_alphas", r.last->gate_alphas()},
                 {"aborted", r.aborted}};
  if (r.aborted) run.summary["abort_reason"] = r.abort_reason;
  write_text(out_dir / "repro.json", run.summary.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
  return run;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of nothing");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

nlohmann::json AblationRow::to_json() const {
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i)
    runs.push_back({{"seed", seeds[i]}, {"final_val", final_val[i].to_json()}, {"val_loss", val_loss[i]}});
  return {{"variant", variant},
          {"runs", runs},
          {"median_cider_d", median_cider},
          {"median_bleu4", median_bleu4},
          {"median_rouge_l", median_rouge_l},
          {"median_val_loss", median_val_loss}};
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                      const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablate: at least one seed is required");
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = base;
    for (const auto& o : v.overrides) cfg.apply_override(o);
    AblationRow row;
    row.variant = v.name;
    std::vector<double> cider, bleu4, rouge, loss;
    for (const auto seed : seeds) {
      cfg.set("train.seed", std::to_string(seed));
      WorkspaceOptions opts;
      opts.splits = {"val"};
      opts.retrieval = cfg.memory_mode() != MemoryMode::kNone;
      const Workspace ws = open_workspace(cfg, opts);
      const PipelineResult r = train_pipeline(ws.model_config(), cfg.train(), ws.trainer_inputs());
      if (r.aborted) throw NumericalAbort("ablate: variant '" + v.name + "' seed " + std::to_string(seed) + ": " +
                                          r.abort_reason);
      row.seeds.push_back(seed);
      row.final_val.push_back(r.final_val);
      row.val_loss.push_back(r.xe_val_loss);
      cider.push_back(r.final_val.cider_d);
      bleu4.push_back(r.final_val.bleu[3]);
      rouge.push_back(r.final_val.rouge_l);
      loss.push_back(r.xe_val_loss);
    }
    row.median_cider = median(cider);
    row.median_bleu4 = median(bleu4);
    row.median_rouge_l = median(rouge);
    row.median_val_loss = median(loss);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ratcap
