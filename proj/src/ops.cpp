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

#include "ratcap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ratcap {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

bool tracks(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

// Builds the output node; the backward closure is attached only when some
// input participates in the graph.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& in : inputs) any = any || tracks(in);
  if (any) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Parent grad buffer, or null when that parent is not differentiated.
double* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad.data() : nullptr;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_2d(const Tensor& x, const char* op) {
  if (x.dim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_to_string(x.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* G = self.grad.data();
    const double* A = self.parents[0]->data.data();
    const double* B = self.parents[1]->data.data();
    if (double* gA = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          gA[i * k + p] += acc;
        }
    }
    if (double* gB = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (double* g = grad_of(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& A = self.parents[0]->data;
    const auto& B = self.parents[1]->data;
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A[i];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.dim() != 1 || x.dim() == 0 || x.shape().back() != bias.numel()) {
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match last axis of " +
                     shape_to_string(x.shape()));
  }
  const std::size_t n = bias.numel();
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  return make_result(x.shape(), std::move(out), {x, bias}, [n](Node& self) {
    if (double* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& s, const Tensor& x) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must be a scalar, got " + shape_to_string(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x.data()[i];
  return make_result(x.shape(), std::move(out), {s, x}, [](Node& self) {
    const double sv = self.parents[0]->data[0];
    const auto& X = self.parents[1]->data;
    if (double* g = grad_of(self, 0)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * X[i];
      g[0] += acc;
    }
    if (double* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
  });
}

Tensor rsub(double c, const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c - x.data()[i];
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    const auto& X = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (X[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    // Split by sign so exp never overflows.
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.data[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.data()[i]);
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    const auto& X = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / X[i];
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result({}, {acc}, {x}, [](Node& self) {
    double* g = grad_of(self, 0);
    const double up = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += up;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, int axis) {
  const int nd = static_cast<int>(x.dim());
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (int i = ax + 1; i < nd; ++i) inner *= x.shape()[i];
  const std::size_t len = x.shape()[ax];

  std::vector<double> out(x.numel());
  const double* X = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, X[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        out[base + j * inner] = std::exp(X[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  return make_result(x.shape(), std::move(out), {x}, [outer, inner, len](Node& self) {
    double* g = grad_of(self, 0);
    const auto& Y = self.data;
    const auto& G = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += Y[base + j * inner] * G[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += Y[idx] * (G[idx] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.dim() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  std::vector<double> out(x.numel());
  const double* X = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, len](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < len; ++j) gsum += self.grad[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t idx = r * len + j;
        g[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.dim() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                     shape_to_string(bias.shape()) + " do not match last axis of " + shape_to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const double* X = x.data().data();
  const double* G = gain.data().data();
  const double* B = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = X + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * G[j] + B[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const double* Gain = self.parents[1]->data.data();
                       double* gx = grad_of(self, 0);
                       double* gg = grad_of(self, 1);
                       double* gb = grad_of(self, 2);
                       const double dn = static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* up = self.grad.data() + r * n;
                         const double* xh = xhat.data() + r * n;
                         if (gg)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += up[j] * xh[j];
                         if (gb)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += up[j];
                         if (gx) {
                           double mean_d = 0.0, mean_dx = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = up[j] * Gain[j];
                             mean_d += d;
                             mean_dx += d * xh[j];
                           }
                           mean_d /= dn;
                           mean_dx /= dn;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = up[j] * Gain[j];
                             gx[r * n + j] += inv_std[r] * (d - mean_d - xh[j] * mean_dx);
                           }
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_2d(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [d, idx = std::move(idx)](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[r]) * d + j] += self.grad[r * d + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) {
      throw ShapeError("concat_rows: column mismatch " + shape_to_string(parts[0].shape()) + " vs " +
                       shape_to_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

  auto node = std::make_shared<Node>();
  node->shape = {total, d};
  node->data = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || tracks(p);
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [](Node& self) {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const std::size_t n = self.parents[i]->data.size();
        if (double* g = grad_of(self, i))
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[offset + j];
        offset += n;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_to_string(x.shape()));
  }
  const std::size_t d = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * d));
  return make_result({end - begin, d}, std::move(out), {x}, [begin, d](Node& self) {
    double* g = grad_of(self, 0) + begin * d;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather_cols(const Tensor& x, std::span<const int> cols) {
  require_2d(x, "gather_cols");
  const std::size_t n = x.cols();
  if (cols.size() != x.rows()) {
    throw ShapeError("gather_cols: " + std::to_string(cols.size()) + " indices for " + shape_to_string(x.shape()));
  }
  std::vector<double> out(cols.size());
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= n) throw std::out_of_range("gather_cols: index out of range");
    out[r] = x.data()[r * n + static_cast<std::size_t>(cols[r])];
  }
  std::vector<int> idx(cols.begin(), cols.end());
  return make_result({cols.size()}, std::move(out), {x}, [n, idx = std::move(idx)](Node& self) {
    double* g = grad_of(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) g[r * n + static_cast<std::size_t>(idx[r])] += self.grad[r];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_2d(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_to_string(logits.shape()));
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(v)) throw std::out_of_range("cross_entropy: target id beyond vocabulary");
    if (t >= 0) ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: every position is ignored");

  std::vector<double> probs(rows * v, 0.0);
  double loss = 0.0;
  const double* L = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    const double* row = L + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[targets[r]];
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(row[j] - mx) / z;
  }
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({}, {loss * inv}, {logits},
                     [rows, v, inv, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
                       double* g = grad_of(self, 0);
                       const double up = self.grad[0] * inv;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] < 0) continue;
                         for (std::size_t j = 0; j < v; ++j) g[r * v + j] += up * probs[r * v + j];
                         g[r * v + static_cast<std::size_t>(tgt[r])] -= up;
                       }
                     });
}

AttentionMask::AttentionMask(std::size_t queries, std::size_t keys, bool allowed)
    : queries_(queries), keys_(keys), allowed_(queries * keys, allowed ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t length) {
  AttentionMask m(length, length, false);
  for (std::size_t q = 0; q < length; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t queries, std::span<const std::uint8_t> is_pad) {
  AttentionMask m(queries, is_pad.size(), true);
  for (std::size_t q = 0; q < queries; ++q)
    for (std::size_t k = 0; k < is_pad.size(); ++k)
      if (is_pad[k]) m.set(q, k, false);
  return m;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const AttentionMask* mask) {
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_2d(v, "attention");
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != tk) {
    throw ShapeError("attention: q " + shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) + ", v " +
                     shape_to_string(v.shape()) + " are incompatible");
  }
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (mask && (mask->queries() != tq || mask->keys() != tk)) {
    throw ShapeError("attention: mask is " + std::to_string(mask->queries()) + "x" + std::to_string(mask->keys()) +
                     " for " + std::to_string(tq) + " queries and " + std::to_string(tk) + " keys");
  }
  if (mask) {
    for (std::size_t i = 0; i < tq; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < tk && !any; ++j) any = mask->allowed(i, j);
      if (!any) throw std::invalid_argument("attention: query row " + std::to_string(i) + " has every key masked");
    }
  }

  const std::size_t dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> probs(heads * tq * tk);
  std::vector<double> out(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs.data() + (h * tq + i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + c0 + c] * K[j * d + c0 + c];
        s *= scl;
        if (mask && !mask->allowed(i, j)) s += kMaskedLogit;
        p[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < tk; ++j) p[j] /= z;
      double* o = out.data() + i * d + c0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (p[j] == 0.0) continue;
        const double* vr = V + j * d + c0;
        for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vr[c];
      }
    }
  }

  return make_result({tq, d}, std::move(out), {q, k, v},
                     [heads, tq, tk, d, dh, scl, probs = std::move(probs)](Node& self) {
                       const double* Q = self.parents[0]->data.data();
                       const double* K = self.parents[1]->data.data();
                       const double* V = self.parents[2]->data.data();
                       double* gq = grad_of(self, 0);
                       double* gk = grad_of(self, 1);
                       double* gv = grad_of(self, 2);
                       const double* G = self.grad.data();
                       std::vector<double> dp(tk);
                       for (std::size_t h = 0; h < heads; ++h) {
                         const std::size_t c0 = h * dh;
                         for (std::size_t i = 0; i < tq; ++i) {
                           const double* p = probs.data() + (h * tq + i) * tk;
                           const double* go = G + i * d + c0;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < tk; ++j) {
                             double acc = 0.0;
                             for (std::size_t c = 0; c < dh; ++c) acc += go[c] * V[j * d + c0 + c];
                             dp[j] = acc;
                             dot += p[j] * acc;
                             if (gv && p[j] != 0.0)
                               for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * go[c];
                           }
                           for (std::size_t j = 0; j < tk; ++j) {
                             if (p[j] == 0.0) continue;
                             const double ds = p[j] * (dp[j] - dot) * scl;
                             if (gq)
                               for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds * K[j * d + c0 + c];
                             if (gk)
                               for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds * Q[i * d + c0 + c];
                           }
                         }
                       }
                     });
}

Tensor Linear::operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

Tensor multi_head_attention(const Tensor& query_src, const Tensor& key_value_src, const AttentionMask* mask,
                            const AttentionWeights& weights, std::size_t heads) {
  if (query_src.cols() != key_value_src.cols()) {
    throw ShapeError("multi_head_attention: query source " + shape_to_string(query_src.shape()) +
                     " and key/value source " + shape_to_string(key_value_src.shape()) + " differ in width");
  }
  const std::size_t d = weights.query.weight.cols();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  Tensor q = weights.query(query_src);
  Tensor k = weights.key(key_value_src);
  Tensor v = weights.value(key_value_src);
  return weights.output(attention(q, k, v, heads, mask));
}

}  // namespace ratcap
