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

// Central finite-difference oracle. It only reads forward values, so it stays
// independent of the backward closures it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ratcap/tensor.hpp"

namespace ratcap::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Relative error with a floor: pairs where both magnitudes are below
// `tiny` are compared absolutely instead (so the bound becomes 1e-9 absolute
// at the 1e-4 tolerance, above the ~1e-10 roundoff of a 1e-5 central step).
inline double rel_error(double a, double b, double tiny = 1e-5) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < tiny) return std::abs(a - b) / tiny;
  return std::abs(a - b) / scale;
}

/// `loss` must rebuild the graph from the current values of `inputs`.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                  double step = 1e-5, std::size_t max_per_input = 0) {
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    std::size_t stride = 1;
    if (max_per_input && values.size() > max_per_input) stride = values.size() / max_per_input;
    for (std::size_t j = 0; j < values.size(); j += stride) {
      const double orig = values[j];
      values[j] = orig + step;
      const double up = loss().item();
      values[j] = orig - step;
      const double down = loss().item();
      values[j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_error(analytic[i][j], numeric);
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i][j] - numeric));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = "input " + std::to_string(i) + "[" + std::to_string(j) + "] analytic " +
                       std::to_string(analytic[i][j]) + " numeric " + std::to_string(numeric);
      }
      ++result.checked;
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

}  // namespace ratcap::testing
