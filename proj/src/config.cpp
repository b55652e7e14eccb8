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

#include "ratcap/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace ratcap {

nlohmann::json DataConfig::to_json() const {
  return {{"train", train},         {"val", val},   {"test", test},  {"tokenizer", tokenizer},
          {"bpe_vocab", bpe_vocab}, {"datastore", datastore}, {"index", index}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  c.train = j.at("train").get<std::string>();
  c.val = j.at("val").get<std::string>();
  c.test = j.at("test").get<std::string>();
  c.tokenizer = j.at("tokenizer").get<std::string>();
  c.bpe_vocab = j.at("bpe_vocab").get<std::size_t>();
  c.datastore = j.at("datastore").get<std::string>();
  c.index = j.at("index").get<std::string>();
  return c;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment outside quotes.
std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(std::string_view v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

template <typename T>
T parse_number(std::string_view text, const std::string& key) {
  T out{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": cannot parse '" + std::string(text) + "'");
  return out;
}

// Converts `text` to the JSON type of the existing value.
nlohmann::json convert(const nlohmann::json& current, std::string_view text, const std::string& key) {
  const std::string v = unquote(trim(text));
  if (current.is_boolean()) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
  }
  if (current.is_number_unsigned() || current.is_number_integer()) {
    if (!v.empty() && v[0] == '-') throw ConfigError(key + ": must be non-negative");
    return parse_number<std::uint64_t>(v, key);
  }
  if (current.is_number_float()) return parse_number<double>(v, key);
  return v;
}

}  // namespace

RunConfig::RunConfig() {
  ModelConfig m;
  values_["model"] = m.to_json();
  values_["train"] = TrainConfig{}.to_json();
  values_["retrieval"] = RetrievalConfig{}.to_json();
  values_["data"] = DataConfig{}.to_json();
}

void RunConfig::set(std::string_view dotted_key, std::string_view value) {
  const std::string key(trim(dotted_key));
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError("config key '" + key + "' must be section.field");
  const std::string section = key.substr(0, dot), field = key.substr(dot + 1);
  if (!values_.contains(section)) throw ConfigError("unknown config section [" + section + "]");
  auto& sec = values_[section];
  if (!sec.contains(field)) throw ConfigError("unknown config key '" + key + "'");
  sec[field] = convert(sec[field], value, key);
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' needs key=value");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!cfg.values_.contains(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside a section");
    try {
      cfg.set(section + "." + std::string(trim(line.substr(0, eq))), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

namespace {

template <typename T>
T typed(const nlohmann::json& j, const char* section) {
  try {
    return T::from_json(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("[") + section + "] " + e.what());
  }
}

}  // namespace

ModelConfig RunConfig::model() const { return typed<ModelConfig>(values_["model"], "model"); }
TrainConfig RunConfig::train() const { return typed<TrainConfig>(values_["train"], "train"); }
RetrievalConfig RunConfig::retrieval() const { return typed<RetrievalConfig>(values_["retrieval"], "retrieval"); }
DataConfig RunConfig::data() const { return typed<DataConfig>(values_["data"], "data"); }

MemoryMode RunConfig::memory_mode() const {
  return parse_memory_mode(values_["model"]["memory_mode"].get<std::string>());
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  bool first = true;
  for (const char* section : {"model", "train", "retrieval", "data"}) {
    if (!first) out << "\n";
    first = false;
    out << "[" << section << "]\n";
    // nlohmann::json objects iterate in key order.
    for (const auto& [key, value] : values_[section].items()) out << key << " = " << value.dump() << "\n";
  }
  return out.str();
}

std::uint64_t RunConfig::hash() const { return fnv1a(to_text()); }

}  // namespace ratcap
