#pragma once

// Dense row-major float64 tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record their inputs and a local gradient rule; backward()
// walks the recorded graph once in reverse topological order. Only one
// broadcast rule exists: a vector [c] (or [1 x c]) applied to every row of an
// [r x c] matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mlsan/errors.hpp"

namespace mlsan {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;
};

inline thread_local bool grad_enabled = true;

// When set, relu() folds its on/off pattern into this hash. Gradient checks
// use it to notice a finite-difference stencil straddling a kink.
inline thread_local std::uint64_t* kink_signature = nullptr;

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw DimensionError("shape " + shape_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().data.size(); }
  std::size_t rows() const { return rank() == 2 ? node().shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node().shape.back(); }

  std::span<const double> data() const { return node().data; }
  // Direct writes are only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node().data; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node().data[0];
  }
  double at(std::size_t r, std::size_t c) const { return node().data[r * cols() + c]; }
  double operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().is_leaf; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() { return node().grad; }
  void zero_grad() {
    auto& n = node();
    n.grad.assign(n.data.size(), 0.0);
  }

  // A fresh leaf sharing no graph history. Gradients never flow through it.
  Tensor detach() const { return Tensor(shape(), node().data, false); }

  // Deep copy of values (and requires_grad flag) as a new leaf.
  Tensor clone() const { return Tensor(shape(), node().data, requires_grad()); }

  detail::Node& node() const {
    if (!node_) throw StateError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(const detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

// Builds an operation output. The backward rule and parents are recorded only
// when recording is enabled and some input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(const detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs_grad = false;
  if (detail::grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& in : inputs) node->parents.push_back(in.handle());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
  }
}

inline bool wants_grad(const Node& n) { return n.requires_grad && !n.grad.empty(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(r * c, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = &B[p * c];
      double* orow = &out[i * c];
      for (std::size_t j = 0; j < c; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.handle();
  auto bn = b.handle();
  return make_result(Shape{r, c}, std::move(out), {a, b}, [an, bn, r, k, c](const detail::Node& self) {
    const auto& G = self.grad;
    if (detail::wants_grad(*an)) {
      // dA = dC . B^T
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += G[i * c + j] * bn->data[p * c + j];
          an->grad[i * k + p] += s;
        }
      }
    }
    if (detail::wants_grad(*bn)) {
      // dB = A^T . dC
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an->data[i * k + p];
          for (std::size_t j = 0; j < c; ++j) bn->grad[p * c + j] += aip * G[i * c + j];
        }
      }
    }
  });
}

enum class BinaryOp { add, sub, mul };

// Per-element a (op) b. `b` either matches `a` exactly or is a row vector
// broadcast over the rows of matrix `a`.
inline Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool row_broadcast = !same && a.rank() == 2 &&
                             ((b.rank() == 1 && b.shape()[0] == a.shape()[1]) ||
                              (b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1]));
  if (!same && !row_broadcast) {
    throw DimensionError("elementwise shapes not compatible: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t n = a.size();
  const std::size_t width = b.size();
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = B[i % width];
    switch (op) {
      case BinaryOp::add: out[i] = A[i] + y; break;
      case BinaryOp::sub: out[i] = A[i] - y; break;
      case BinaryOp::mul: out[i] = A[i] * y; break;
    }
  }
  auto an = a.handle();
  auto bn = b.handle();
  return make_result(a.shape(), std::move(out), {a, b}, [an, bn, op, n, width](const detail::Node& self) {
    const auto& G = self.grad;
    if (detail::wants_grad(*an)) {
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += op == BinaryOp::mul ? G[i] * bn->data[i % width] : G[i];
      }
    }
    if (detail::wants_grad(*bn)) {
      for (std::size_t i = 0; i < n; ++i) {
        double g = G[i];
        if (op == BinaryOp::sub) g = -g;
        if (op == BinaryOp::mul) g *= an->data[i];
        bn->grad[i % width] += g;
      }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }

inline Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  auto xn = x.handle();
  return make_result(x.shape(), std::move(out), {x}, [xn, factor](const detail::Node& self) {
    if (!detail::wants_grad(*xn)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += factor * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

// Logistic function, branch form, clamped so every output lies strictly in (0, 1).
inline double stable_sigmoid(double x) {
  double y;
  if (x >= 0.0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  return std::clamp(y, lo, hi);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(X[i]);
  auto xn = x.handle();
  return make_result(x.shape(), std::move(out), {x}, [xn](const detail::Node& self) {
    if (!detail::wants_grad(*xn)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.data[i];
      xn->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
  if (std::uint64_t* sig = detail::kink_signature) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      *sig = (*sig ^ static_cast<std::uint64_t>(X[i] > 0.0 ? 0x9d : 0x3b)) * 0x100000001b3ull;
    }
  }
  auto xn = x.handle();
  return make_result(x.shape(), std::move(out), {x}, [xn](const detail::Node& self) {
    if (!detail::wants_grad(*xn)) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xn->data[i] > 0.0) xn->grad[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

// [r x c1] ++ [r x c2] -> [r x (c1 + c2)]
inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one input");
  const std::size_t r = parts[0].rank() == 2 ? parts[0].shape()[0] : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.shape()[0] != r) {
      throw DimensionError("concat_cols row counts differ: " + shape_string(parts[0].shape()) +
                           " vs " + shape_string(p.shape()));
    }
    total += p.shape()[1];
  }
  std::vector<double> out(r * total);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    auto P = p.data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(&P[i * w], w, &out[i * total + offset]);
    }
    widths.push_back(w);
    offset += w;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.handle());
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(Shape{r, total}, std::move(out), inputs,
                     [nodes, widths, r, total](const detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         const std::size_t w = widths[k];
                         if (detail::wants_grad(*nodes[k])) {
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < w; ++j) {
                               nodes[k]->grad[i * w + j] += self.grad[i * total + off + j];
                             }
                           }
                         }
                         off += w;
                       }
                     });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(std::span<const Tensor>(parts));
}

// Row lookup: out[i] = table[indices[i]]. Gradients scatter-add into the table.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t vocab = table.shape()[0], width = table.shape()[1];
  if (indices.empty()) throw ContractError("gather_rows with no indices");
  std::vector<double> out(indices.size() * width);
  auto T = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vocab) {
      throw IndexError("row index " + std::to_string(indices[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(&T[indices[i] * width], width, &out[i * width]);
  }
  auto tn = table.handle();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(Shape{indices.size(), width}, std::move(out), {table},
                     [tn, idx, width](const detail::Node& self) {
                       if (!detail::wants_grad(*tn)) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (std::size_t j = 0; j < width; ++j) {
                           tn->grad[idx[i] * width + j] += self.grad[i * width + j];
                         }
                       }
                     });
}

// out[i] = mean of x rows listed in groups[i]; an empty group yields a zero row.
inline Tensor mean_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t n = x.shape()[0], width = x.shape()[1];
  if (groups.empty()) throw ContractError("mean_rows with no output rows");
  std::vector<double> out(groups.size() * width, 0.0);
  auto X = x.data();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].empty()) continue;
    const double inv = 1.0 / static_cast<double>(groups[i].size());
    for (std::size_t src : groups[i]) {
      if (src >= n) throw IndexError("mean_rows source row " + std::to_string(src) + " out of range");
      for (std::size_t j = 0; j < width; ++j) out[i * width + j] += X[src * width + j];
    }
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] *= inv;
  }
  auto xn = x.handle();
  return make_result(Shape{groups.size(), width}, std::move(out), {x},
                     [xn, groups, width](const detail::Node& self) {
                       if (!detail::wants_grad(*xn)) return;
                       for (std::size_t i = 0; i < groups.size(); ++i) {
                         if (groups[i].empty()) continue;
                         const double inv = 1.0 / static_cast<double>(groups[i].size());
                         for (std::size_t src : groups[i]) {
                           for (std::size_t j = 0; j < width; ++j) {
                             xn->grad[src * width + j] += self.grad[i * width + j] * inv;
                           }
                         }
                       }
                     });
}

inline Tensor sum(const Tensor& x) {
  auto X = x.data();
  double s = 0.0;
  for (double v : X) s += v;
  auto xn = x.handle();
  return make_result(Shape{}, {s}, {x}, [xn](const detail::Node& self) {
    if (!detail::wants_grad(*xn)) return;
    for (double& g : xn->grad) g += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Row-wise softmax probabilities (no graph).
inline std::vector<double> softmax_rows(const Tensor& logits) {
  detail::require_matrix(logits, "softmax_rows");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  auto Z = logits.data();
  std::vector<double> p(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    const double m = *std::max_element(&Z[i * c], &Z[i * c] + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (p[i * c + j] = std::exp(Z[i * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= s;
  }
  return p;
}

// Mean over the batch of w[target] * -log softmax(logits)[target].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                                    std::span<const double> class_weights = {}) {
  detail::require_matrix(logits, "softmax_cross_entropy");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (targets.size() != b) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(b) + " rows");
  }
  if (!class_weights.empty()) {
    if (class_weights.size() != c) throw ContractError("class weight count differs from class count");
    for (double w : class_weights) {
      if (!(w > 0.0)) throw ContractError("class weights must be positive");
    }
  }
  for (std::size_t t : targets) {
    if (t >= c) {
      throw IndexError("target class " + std::to_string(t) + " out of range for " +
                       std::to_string(c) + " classes");
    }
  }
  auto Z = logits.data();
  std::vector<double> probs(b * c);
  std::vector<double> weights(b, 1.0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = &Z[i * c];
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[i * c + j] = std::exp(z[j] - m));
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    if (!class_weights.empty()) weights[i] = class_weights[targets[i]];
    total += weights[i] * (lse - z[targets[i]]);
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  auto zn = logits.handle();
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result(Shape{}, {total * inv_b}, {logits},
                     [zn, probs = std::move(probs), weights = std::move(weights), tgt, b, c,
                      inv_b](const detail::Node& self) {
                       if (!detail::wants_grad(*zn)) return;
                       const double up = self.grad[0];
                       for (std::size_t i = 0; i < b; ++i) {
                         const double f = up * weights[i] * inv_b;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = j == tgt[i] ? 1.0 : 0.0;
                           zn->grad[i * c + j] += f * (probs[i * c + j] - onehot);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

// Populates grad on every requires-grad leaf reachable from `loss`. Leaf
// gradients accumulate; callers zero them between steps. A graph can be swept
// once: afterwards its interior nodes release their history.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  auto& root = loss.node();
  if (root.consumed) throw StateError("backward called twice on the same graph; rerun forward");
  if (!root.requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        if (p->consumed) throw StateError("graph references a node from an already swept graph");
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf) {
      n->grad.assign(n->data.size(), 0.0);
    } else if (n->grad.size() != n->data.size()) {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (n->is_leaf) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
  }
}

}  // namespace mlsan
