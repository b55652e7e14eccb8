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

#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ratcap {

template <class State, class Step>
std::vector<BeamHypothesis> beam_search(State initial, std::size_t beam_size, std::size_t max_len, int bos, int eos,
                                        Step&& step) {
  if (beam_size == 0) throw std::invalid_argument("beam_search: beam size must be at least 1");
  if (max_len < 2) throw std::invalid_argument("beam_search: max_len must leave room for one token");

  struct Live {
    BeamHypothesis hyp;
    State state;
    std::vector<double> next;
  };
  struct Expansion {
    std::size_t parent;
    int token;
    double log_prob;
    double step_log_prob;
  };
  auto finish = [](BeamHypothesis h) {
    h.finished = true;
    h.score = h.log_prob / static_cast<double>(h.tokens.size() - 1);
    return h;
  };

  std::vector<BeamHypothesis> finished;
  std::vector<Live> active;
  {
    Live root{{{bos}, 0.0, 0.0, false}, std::move(initial), {}};
    root.next = step(root.state, bos);
    active.push_back(std::move(root));
  }

  std::vector<Expansion> cands;
  while (!active.empty() && finished.size() < beam_size) {
    const std::size_t slots = beam_size - finished.size();
    cands.clear();
    for (std::size_t p = 0; p < active.size(); ++p) {
      const auto& next = active[p].next;
      for (std::size_t t = 0; t < next.size(); ++t)
        if (std::isfinite(next[t])) cands.push_back({p, static_cast<int>(t), active[p].hyp.log_prob + next[t], next[t]});
    }
    const std::size_t take = std::min(slots, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(),
                      [](const Expansion& a, const Expansion& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        // Sums can round together; the step term keeps a
                        // single-parent beam in exact argmax order.
                        if (a.step_log_prob != b.step_log_prob) return a.step_log_prob > b.step_log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });

    std::vector<Live> next_active;
    for (std::size_t c = 0; c < take; ++c) {
      const auto& e = cands[c];
      BeamHypothesis h = active[e.parent].hyp;
      h.tokens.push_back(e.token);
      h.log_prob = e.log_prob;
      if (e.token == eos || h.tokens.size() >= max_len) {
        finished.push_back(finish(std::move(h)));
        continue;
      }
      Live child{std::move(h), active[e.parent].state, {}};
      child.next = step(child.state, e.token);
      next_active.push_back(std::move(child));
    }
    active = std::move(next_active);
  }

  std::stable_sort(finished.begin(), finished.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  return finished;
}

}  // namespace ratcap
