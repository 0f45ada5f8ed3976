#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every operation on tensors that require gradients records a node holding
// its inputs and a backward rule. backward() topologically orders the nodes
// reachable from a scalar root (the tape) and visits each node once in
// reverse, accumulating gradients into inputs. The graph is rebuilt by every
// forward pass, so control flow may differ between calls.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dhan {

using Shape = std::vector<std::size_t>;

// Reductions and products accumulate in double regardless of storage type.
using acc_t = double;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void throw_shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  std::ostringstream msg;
  msg << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  throw ShapeError(msg.str());
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct value access, meant for leaves (parameters, buffers, inputs).
  std::span<T> data_mut() { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
    else node_->grad.clear();
  }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  std::string_view op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Same values, no history.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

 private:
  NodePtr node_;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds the result node of a primitive. Inputs and the backward rule are
// kept only when some input needs a gradient.
template <class T, class Inputs>
Tensor<T> make_result_impl(std::string_view op, Shape shape, std::vector<T> value,
                           const Inputs& inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <class T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  return make_result_impl<T>(op, std::move(shape), std::move(value), inputs, std::move(backward));
}

template <class T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  return make_result_impl<T>(op, std::move(shape), std::move(value), inputs, std::move(backward));
}

// Gradient buffer of input i, or nullptr when that input takes no gradient.
template <class T>
T* grad_of(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

template <class T>
const T* value_of(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->value.data();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape and backward pass

// Nodes reachable from a root that take part in differentiation, in
// topological order (every node after its inputs).
template <class T>
struct Tape {
  std::vector<detail::Node<T>*> nodes;
};

template <class T>
Tape<T> record_tape(const Tensor<T>& root) {
  Tape<T> tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  std::unordered_set<const detail::Node<T>*> seen;
  // Iterative post-order DFS; second field is the next input to explore.
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

// Accumulates d(root)/d(leaf) into every reachable leaf that requires a
// gradient. Intermediate gradients are reset at the start of each pass.
template <class T>
Tape<T> backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) throw std::logic_error("backward: root does not depend on any gradient-requiring tensor");
  auto tape = record_tape(root);
  for (auto* node : tape.nodes) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), T(0));
    else node->ensure_grad();
  }
  root.node()->grad[0] += T(1);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  return tape;
}

// ---------------------------------------------------------------------------
// Elementwise primitives

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto n = self.grad.size();
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = detail::grad_of(self, k)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto n = self.grad.size();
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw_shape_mismatch("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
    const auto n = self.grad.size();
    const T* x = detail::value_of(self, 0);
    const T* y = detail::value_of(self, 1);
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * y[i];
    }
    if (T* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

// x * c for a constant c.
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a}, [c](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    }
  });
}

// x + c for a constant c.
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// Identity inside [lo, hi], zero gradient outside.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lower bound exceeds upper bound");
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return detail::make_result<T>("clamp", a.shape(), std::move(out), {a}, [lo, hi](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const T* x = detail::value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (x[i] >= lo && x[i] <= hi) g[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  return detail::make_result<T>("log", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const T* x = detail::value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / x[i];
    }
  });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return detail::make_result<T>("exp", a.shape(), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

// (m, k) x (k, n) -> (m, n)
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw_shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  std::vector<acc_t> row(n);
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const acc_t xv = x[i * k + p];
      const T* yr = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xv * yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(row[j]);
  }
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& self) {
    const T* x = detail::value_of(self, 0);
    const T* y = detail::value_of(self, 1);
    const T* go = self.grad.data();
    if (T* gx = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          acc_t s = 0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<acc_t>(go[i * n + j]) * y[p * n + j];
          gx[i * k + p] += static_cast<T>(s);
        }
      }
    }
    if (T* gy = detail::grad_of(self, 1)) {
      std::vector<acc_t> acc(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const acc_t xv = x[i * k + p];
          for (std::size_t j = 0; j < n; ++j) acc[p * n + j] += xv * go[i * n + j];
        }
      }
      for (std::size_t i = 0; i < k * n; ++i) gy[i] += static_cast<T>(acc[i]);
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  acc_t s = 0;
  for (auto v : a.data()) s += v;
  return detail::make_result<T>("sum", {1}, {static_cast<T>(s)}, {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  acc_t s = 0;
  for (auto v : a.data()) s += v;
  const acc_t n = static_cast<acc_t>(a.numel());
  return detail::make_result<T>("mean", {1}, {static_cast<T>(s / n)}, {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      const T share = static_cast<T>(static_cast<acc_t>(self.grad[0]) / static_cast<acc_t>(n));
      for (std::size_t i = 0; i < n; ++i) g[i] += share;
    }
  });
}

// Sums over the last axis: (..., k) -> (...). A rank-1 input yields shape (1).
template <class T>
Tensor<T> sum_last(const Tensor<T>& a) {
  const std::size_t k = a.shape().back();
  const std::size_t rows = a.numel() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(rows);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    acc_t s = 0;
    for (std::size_t j = 0; j < k; ++j) s += x[r * k + j];
    out[r] = static_cast<T>(s);
  }
  return detail::make_result<T>("sum_last", std::move(out_shape), std::move(out), {a}, [rows, k](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) g[r * k + j] += self.grad[r];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw_shape_mismatch("reshape", a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {a}, [](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// Joins tensors along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for shape " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw_shape_mismatch("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) throw_shape_mismatch("concat", first, p.shape());
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.dim(axis) * inner;
    auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  return detail::make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                                [outer, out_row, offsets](detail::Node<T>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      T* g = detail::grad_of(self, k);
      if (!g) continue;
      const std::size_t row = self.inputs[k]->value.size() / outer;
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * out_row + offsets[k];
        for (std::size_t i = 0; i < row; ++i) g[o * row + i] += src[i];
      }
    }
  });
}

// Slice [start, start + length) along `axis`.
template <class T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::size_t in_row = a.dim(axis) * inner, out_row = length * inner, off = start * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * out_row);
  auto x = a.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * in_row + off, out_row, out.data() + o * out_row);
  return detail::make_result<T>("narrow", std::move(out_shape), std::move(out), {a},
                                [outer, in_row, out_row, off](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < out_row; ++i) g[o * in_row + off + i] += self.grad[o * out_row + i];
      }
    }
  });
}

// Selects one entry per row: (n, k), indices[n] -> (n).
template <class T>
Tensor<T> pick(const Tensor<T>& a, std::span<const std::size_t> indices) {
  if (a.rank() != 2 || indices.size() != a.dim(0)) {
    throw ShapeError("pick: expected (n, k) input with n indices, got " + shape_str(a.shape()) + " and " +
                     std::to_string(indices.size()) + " indices");
  }
  const std::size_t n = a.dim(0), k = a.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (idx[r] >= k) throw std::out_of_range("pick: index " + std::to_string(idx[r]) + " out of range for " + std::to_string(k) + " columns");
    out[r] = a.data()[r * k + idx[r]];
  }
  return detail::make_result<T>("pick", {n}, std::move(out), {a}, [idx, k](detail::Node<T>& self) {
    if (T* g = detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) g[r * k + idx[r]] += self.grad[r];
    }
  });
}

}  // namespace dhan
