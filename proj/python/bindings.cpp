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


// Python bindings: structured results cross the boundary as JSON text and
// are decoded by the package's __init__.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ratcap/cli.hpp"
#include "ratcap/workflow.hpp"

namespace py = pybind11;

namespace {

using ratcap::BpeTokenizer;
using ratcap::Captioner;
using ratcap::HnswIndex;

ratcap::Tensor grid_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("grid must be a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return ratcap::Tensor::matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

std::vector<ratcap::Embedding> rows_from(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("vectors must be a 2-D array");
  const auto n = static_cast<std::size_t>(a.shape(0)), d = static_cast<std::size_t>(a.shape(1));
  std::vector<ratcap::Embedding> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(a.data() + i * d, a.data() + (i + 1) * d);
  return out;
}

// Decoded text may end inside a multi-byte character.
py::str text(const std::string& s) {
  return py::reinterpret_steal<py::str>(PyUnicode_DecodeUTF8(s.data(), static_cast<Py_ssize_t>(s.size()), "replace"));
}

}  // namespace

PYBIND11_MODULE(_ratcap, m) {
  m.doc() = "retrieval-augmented image captioning";
  m.def("version", &ratcap::version);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = ratcap::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a ratcap command; returns (exit_code, stdout, stderr).");

  m.def("normalize_text", &ratcap::normalize_text);

  py::class_<BpeTokenizer>(m, "Tokenizer")
      .def_static(
          "train",
          [](const std::vector<std::string>& texts, std::size_t vocab_size, std::size_t max_len) {
            return ratcap::train_bpe(texts, vocab_size, max_len).tokenizer;
          },
          py::arg("texts"), py::arg("vocab_size"), py::arg("max_len") = ratcap::kDefaultMaxLen)
      .def_static(
          "load", [](const std::string& path, std::size_t max_len) { return BpeTokenizer::load(path, max_len); },
          py::arg("path"), py::arg("max_len") = ratcap::kDefaultMaxLen)
      .def("save", [](const BpeTokenizer& t, const std::string& path) { t.save(path); })
      .def("encode", [](const BpeTokenizer& t, const std::string& text) { return t.encode(text).ids; })
      .def("decode", [](const BpeTokenizer& t, const std::vector<int>& ids) { return text(t.decode(ids)); })
      .def_property_readonly("vocab_size", &BpeTokenizer::vocab_size)
      .def_property_readonly("max_len", &BpeTokenizer::max_len);

  m.def(
      "bleu",
      [](const std::string& candidate, const std::vector<std::string>& refs) {
        const auto b = ratcap::bleu(candidate, refs);
        return std::vector<double>(b.begin(), b.end());
      },
      py::arg("candidate"), py::arg("references"), "Sentence BLEU-1..4.");
  m.def(
      "rouge_l",
      [](const std::string& candidate, const std::vector<std::string>& refs) {
        return ratcap::rouge_l(candidate, refs);
      },
      py::arg("candidate"), py::arg("references"));
  m.def(
      "_corpus_eval_json",
      [](const std::map<std::string, std::string>& preds, const std::map<std::string, std::vector<std::string>>& refs) {
        return ratcap::corpus_eval(preds, refs).to_json().dump();
      },
      py::arg("predictions"), py::arg("references"));

  py::class_<HnswIndex>(m, "HnswIndex")
      .def_static(
          "build",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& vectors, std::size_t M,
             std::size_t ef_construction, std::uint64_t seed) {
            const auto rows = rows_from(vectors);
            py::gil_scoped_release release;
            return HnswIndex::build(rows, ratcap::HnswParams{M, ef_construction, seed});
          },
          py::arg("vectors"), py::arg("M") = 32, py::arg("ef_construction") = 200, py::arg("seed") = 1234)
      .def(
          "search",
          [](const HnswIndex& idx, const py::array_t<double, py::array::c_style | py::array::forcecast>& q,
             std::size_t k, std::size_t ef_search) {
            const std::vector<double> query(q.data(), q.data() + q.size());
            std::vector<std::pair<std::uint32_t, double>> out;
            for (const auto& h : idx.search(query, k, ef_search)) out.emplace_back(h.index, h.score);
            return out;
          },
          py::arg("query"), py::arg("k"), py::arg("ef_search") = 64, "Top-k (vertex, inner product), best first.")
      .def("__len__", &HnswIndex::size)
      .def_property_readonly("dim", &HnswIndex::dim)
      .def("checksum", &HnswIndex::checksum);

  py::class_<Captioner>(m, "Captioner")
      .def_static("load", [](const std::string& path) { return Captioner::load(path); })
      .def("_config_json", [](const Captioner& c) { return c.config().to_json().dump(); })
      .def("checksum", &Captioner::checksum)
      .def_property_readonly("num_parameters", [](const Captioner& c) { return c.params().total_elements(); })
      .def("gate_alphas", &Captioner::gate_alphas)
      .def(
          "caption",
          [](const Captioner& c, const py::array_t<double, py::array::c_style | py::array::forcecast>& grid,
             const std::vector<std::string>& memory, const BpeTokenizer& tok, std::size_t beam) {
            const ratcap::Tensor g = grid_from(grid);
            std::vector<ratcap::TokenSequence> mem;
            for (const auto& s : memory) mem.push_back(tok.encode(s));
            std::string out;
            {
              py::gil_scoped_release release;
              ratcap::NoGradGuard no_grad;
              const auto enc = c.encode_image(g);
              const auto encoded = c.encode_memory(mem);
              const auto seq =
                  beam <= 1 ? c.greedy_decode(enc, encoded) : c.beam_search_decode(enc, encoded, beam)[0].sequence;
              out = tok.decode(seq);
            }
            return text(out);
          },
          py::arg("grid"), py::arg("memory"), py::arg("tokenizer"), py::arg("beam") = 1,
          "Captions one feature grid given retrieved captions.");

  py::register_exception<ratcap::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ratcap::CorpusError>(m, "CorpusError", PyExc_RuntimeError);
}
