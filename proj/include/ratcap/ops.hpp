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

#include <cstdint>
#include <span>
#include <vector>

#include "ratcap/tensor.hpp"

namespace ratcap {

/// Value written over disallowed attention logits before the softmax.
inline constexpr double kMaskedLogit = -1e30;
inline constexpr double kLayerNormEps = 1e-9;

// Elementwise and linear algebra. All binary ops require equal shapes unless
// stated otherwise; there is no general broadcasting.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
/// x[..., n] + bias[n], bias broadcast over the leading dims.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// s * x where s is a scalar tensor; gradient flows into both.
Tensor mul_scalar(const Tensor& s, const Tensor& x);
/// c - x, elementwise.
Tensor rsub(double c, const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Max-stabilized softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x);

/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

/// Rows of `table` selected by `ids`.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// out[r] = x[r, cols[r]] for a 2-D x.
Tensor gather_cols(const Tensor& x, std::span<const int> cols);

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
/// Rows whose target is negative are ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Which query rows may attend to which key rows.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t queries, std::size_t keys, bool allowed);

  static AttentionMask causal(std::size_t length);
  /// All queries see every key except the flagged padding positions.
  static AttentionMask key_padding(std::size_t queries, std::span<const std::uint8_t> is_pad);

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool allowed(std::size_t q, std::size_t k) const { return allowed_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool allowed) { allowed_[q * keys_ + k] = allowed ? 1 : 0; }

 private:
  std::size_t queries_ = 0;
  std::size_t keys_ = 0;
  std::vector<std::uint8_t> allowed_;
};

/// Scaled dot-product attention over pre-projected q/k/v, split into `heads`
/// column groups. Returns the concatenated head outputs [Tq x d].
/// Throws if a query row has every key masked.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask* mask = nullptr);

/// x W + b with W stored [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;
  Tensor operator()(const Tensor& x) const;
};

struct AttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

/// Full multi-head attention: projections, per-head attention, output
/// projection. Self-attention when query_src and key_value_src coincide.
Tensor multi_head_attention(const Tensor& query_src, const Tensor& key_value_src,
                            const AttentionMask* mask, const AttentionWeights& weights,
                            std::size_t heads);

}  // namespace ratcap
