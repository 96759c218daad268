#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dasm/error.hpp"

namespace dasm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One record in the define-by-run graph. Value/grad buffers are dense
// row-major doubles; the backward closure pulls this node's grad into its
// parents' grads.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Dense n-dimensional array of 64-bit floats participating in a reverse-mode
// differentiation graph. Copies are shallow handles onto the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    auto node = std::make_shared<detail::Node>();
    node->value.assign(shape_numel(shape), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool is_scalar() const { return numel() == 1 && rank() <= 1; }

  std::span<const double> values() const { return node_->value; }

  // Mutable view of the underlying buffer; meant for leaves and detached
  // buffers only, graph intermediates are immutable after forward.
  std::span<double> raw_values() { return node_->value; }

  double item() const {
    if (!is_scalar()) {
      throw ContractError("item() requires a scalar tensor, got shape " +
                          shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  std::span<const double> grad() const {
    if (!has_grad()) throw StateError("gradient buffer not populated");
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<std::shared_ptr<Node>> parents) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), 0.0);
  node->shape = std::move(shape);
  for (const auto& p : parents) node->requires_grad |= p->requires_grad;
  if (node->requires_grad) node->parents = std::move(parents);
  return Tensor(std::move(node));
}

enum class BinaryKind { add, sub, mul, divide };

inline const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::add: return "add";
    case BinaryKind::sub: return "sub";
    case BinaryKind::mul: return "mul";
    default: return "div";
  }
}

}  // namespace detail

// --- elementwise binary ops -------------------------------------------------
// Broadcasting is restricted to scalar-vs-tensor; anything else must match
// shapes exactly.
inline Tensor binary_op(const Tensor& a, const Tensor& b,
                        detail::BinaryKind kind) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    throw ShapeError(std::string(detail::binary_name(kind)) +
                     ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Shape out_shape = (a_scalar && !b_scalar) ? b.shape() : a.shape();
  Tensor out = detail::make_op(out_shape, {a.node(), b.node()});
  const std::size_t n = out.numel();
  auto* ov = out.node()->value.data();
  const double* av = a.values().data();
  const double* bv = b.values().data();
  const std::size_t sa = a_scalar ? 0 : 1;  // index stride
  const std::size_t sb = b_scalar ? 0 : 1;

  switch (kind) {
    case detail::BinaryKind::add:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] + bv[i * sb];
      break;
    case detail::BinaryKind::sub:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] - bv[i * sb];
      break;
    case detail::BinaryKind::mul:
      for (std::size_t i = 0; i < n; ++i) ov[i] = av[i * sa] * bv[i * sb];
      break;
    case detail::BinaryKind::divide:
      for (std::size_t i = 0; i < n; ++i) {
        if (bv[i * sb] == 0.0) {
          throw DomainError("div: zero divisor at index " + std::to_string(i * sb));
        }
        ov[i] = av[i * sa] / bv[i * sb];
      }
      break;
  }

  if (out.requires_grad()) {
    out.node()->backward = [kind, sa, sb, n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      detail::Node& B = *self.parents[1];
      const double* g = self.grad.data();
      const double* av2 = A.value.data();
      const double* bv2 = B.value.data();
      if (A.requires_grad) {
        A.ensure_grad();
        double* ga = A.grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          double d;
          switch (kind) {
            case detail::BinaryKind::add:
            case detail::BinaryKind::sub: d = g[i]; break;
            case detail::BinaryKind::mul: d = g[i] * bv2[i * sb]; break;
            default: d = g[i] / bv2[i * sb]; break;
          }
          ga[i * sa] += d;
        }
      }
      if (B.requires_grad) {
        B.ensure_grad();
        double* gb = B.grad.data();
        for (std::size_t i = 0; i < n; ++i) {
          double d;
          switch (kind) {
            case detail::BinaryKind::add: d = g[i]; break;
            case detail::BinaryKind::sub: d = -g[i]; break;
            case detail::BinaryKind::mul: d = g[i] * av2[i * sa]; break;
            default: {
              double bb = bv2[i * sb];
              d = -g[i] * av2[i * sa] / (bb * bb);
              break;
            }
          }
          gb[i * sb] += d;
        }
      }
    };
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, detail::BinaryKind::add);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, detail::BinaryKind::sub);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, detail::BinaryKind::mul);
}
inline Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, detail::BinaryKind::divide);
}

// --- elementwise unary ops --------------------------------------------------

inline Tensor exp(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), {a.node()});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.raw_values()[i] = std::exp(a.values()[i]);
  if (out.requires_grad()) {
    out.node()->backward = [n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) A.grad[i] += self.grad[i] * self.value[i];
    };
  }
  return out;
}

inline Tensor log(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), {a.node()});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (a.values()[i] <= 0.0) {
      throw DomainError("log: non-positive operand at index " + std::to_string(i));
    }
    out.raw_values()[i] = std::log(a.values()[i]);
  }
  if (out.requires_grad()) {
    out.node()->backward = [n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) A.grad[i] += self.grad[i] / A.value[i];
    };
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), {a.node()});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out.raw_values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  }
  if (out.requires_grad()) {
    out.node()->backward = [n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (A.value[i] > 0.0) A.grad[i] += self.grad[i];
      }
    };
  }
  return out;
}

inline Tensor neg(const Tensor& a) {
  Tensor out = detail::make_op(a.shape(), {a.node()});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.raw_values()[i] = -a.values()[i];
  if (out.requires_grad()) {
    out.node()->backward = [n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) A.grad[i] -= self.grad[i];
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_op(a.shape(), {a.node()});
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.raw_values()[i] = c * a.values()[i];
  if (out.requires_grad()) {
    out.node()->backward = [n, c](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) A.grad[i] += c * self.grad[i];
    };
  }
  return out;
}

// --- matmul / transpose -----------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: both operands must be rank 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Tensor out = detail::make_op({m, n}, {a.node(), b.node()});
  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* ov = out.raw_values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * n;
      double* orow = ov + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [m, k, n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      detail::Node& B = *self.parents[1];
      const double* g = self.grad.data();
      if (A.requires_grad) {
        A.ensure_grad();
        double* ga = A.grad.data();
        const double* bv2 = B.value.data();
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = g + i * n;
            const double* brow = bv2 + p * n;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (B.requires_grad) {
        B.ensure_grad();
        double* gb = B.grad.data();
        const double* av2 = A.value.data();
        // dB = A^T * G
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av2[i * k + p];
            if (aip == 0.0) continue;
            double* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    };
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose: rank-2 tensor required, got " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = detail::make_op({n, m}, {a.node()});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.raw_values()[j * m + i] = a.values()[i * n + j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [m, n](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          A.grad[i * n + j] += self.grad[j * m + i];
        }
      }
    };
  }
  return out;
}

// --- reductions ---------------------------------------------------------------

namespace detail {

// Resolves a rank<=2 reduction into (slices, slice_len, stride pattern).
// axis == rank means "reduce everything".
struct ReducePlan {
  std::size_t slices;      // number of output elements
  std::size_t len;         // elements per reduced slice
  std::size_t outer_step;  // flat-index step between slices
  std::size_t inner_step;  // flat-index step within a slice
  Shape out_shape;
};

inline ReducePlan plan_reduce(const Tensor& t, std::size_t axis, bool full) {
  if (t.numel() == 0) throw EmptyReductionError("reduction over empty tensor");
  if (full) return {1, t.numel(), 0, 1, Shape{}};
  if (axis >= t.rank()) {
    throw ShapeError("reduction axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(t.shape()));
  }
  if (t.rank() == 1) return {1, t.numel(), 0, 1, Shape{}};
  const std::size_t rows = t.shape()[0], cols = t.shape()[1];
  if (axis == 0) return {cols, rows, 1, cols, Shape{cols}};
  return {rows, cols, cols, 1, Shape{rows}};
}

enum class ReduceKind { sum, mean, max, l2norm };

}  // namespace detail

inline Tensor reduce_impl(const Tensor& t, detail::ReduceKind kind,
                          std::size_t axis, bool full) {
  const auto plan = detail::plan_reduce(t, axis, full);
  Tensor out = detail::make_op(plan.out_shape, {t.node()});
  const double* v = t.values().data();
  std::vector<std::size_t> argmax(kind == detail::ReduceKind::max ? plan.slices : 0);

  for (std::size_t s = 0; s < plan.slices; ++s) {
    const std::size_t base = s * plan.outer_step;
    double acc;
    switch (kind) {
      case detail::ReduceKind::sum:
      case detail::ReduceKind::mean: {
        acc = 0.0;
        for (std::size_t i = 0; i < plan.len; ++i) acc += v[base + i * plan.inner_step];
        if (kind == detail::ReduceKind::mean) acc /= static_cast<double>(plan.len);
        break;
      }
      case detail::ReduceKind::max: {
        // ties broken by lowest index: strict > keeps the first occurrence
        std::size_t best = 0;
        acc = v[base];
        for (std::size_t i = 1; i < plan.len; ++i) {
          const double x = v[base + i * plan.inner_step];
          if (x > acc) {
            acc = x;
            best = i;
          }
        }
        argmax[s] = best;
        break;
      }
      case detail::ReduceKind::l2norm: {
        acc = 0.0;
        for (std::size_t i = 0; i < plan.len; ++i) {
          const double x = v[base + i * plan.inner_step];
          acc += x * x;
        }
        acc = std::sqrt(acc);
        break;
      }
    }
    out.raw_values()[s] = acc;
  }

  if (out.requires_grad()) {
    out.node()->backward = [plan, kind, argmax](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      for (std::size_t s = 0; s < plan.slices; ++s) {
        const std::size_t base = s * plan.outer_step;
        const double g = self.grad[s];
        switch (kind) {
          case detail::ReduceKind::sum:
            for (std::size_t i = 0; i < plan.len; ++i)
              A.grad[base + i * plan.inner_step] += g;
            break;
          case detail::ReduceKind::mean: {
            const double gi = g / static_cast<double>(plan.len);
            for (std::size_t i = 0; i < plan.len; ++i)
              A.grad[base + i * plan.inner_step] += gi;
            break;
          }
          case detail::ReduceKind::max:
            A.grad[base + argmax[s] * plan.inner_step] += g;
            break;
          case detail::ReduceKind::l2norm: {
            const double norm = self.value[s];
            if (norm > 0.0) {
              const double gi = g / norm;
              for (std::size_t i = 0; i < plan.len; ++i) {
                const std::size_t idx = base + i * plan.inner_step;
                A.grad[idx] += gi * A.value[idx];
              }
            }
            break;
          }
        }
      }
    };
  }
  return out;
}

inline Tensor sum(const Tensor& t) { return reduce_impl(t, detail::ReduceKind::sum, 0, true); }
inline Tensor sum(const Tensor& t, std::size_t axis) {
  return reduce_impl(t, detail::ReduceKind::sum, axis, false);
}
inline Tensor mean(const Tensor& t) { return reduce_impl(t, detail::ReduceKind::mean, 0, true); }
inline Tensor mean(const Tensor& t, std::size_t axis) {
  return reduce_impl(t, detail::ReduceKind::mean, axis, false);
}
inline Tensor max(const Tensor& t) { return reduce_impl(t, detail::ReduceKind::max, 0, true); }
inline Tensor max(const Tensor& t, std::size_t axis) {
  return reduce_impl(t, detail::ReduceKind::max, axis, false);
}
inline Tensor l2norm(const Tensor& t) { return reduce_impl(t, detail::ReduceKind::l2norm, 0, true); }
inline Tensor l2norm(const Tensor& t, std::size_t axis) {
  return reduce_impl(t, detail::ReduceKind::l2norm, axis, false);
}

// Concatenates scalar tensors into a rank-1 tensor. Gradient routes back to
// each scalar.
inline Tensor stack(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("stack: empty input");
  std::vector<std::shared_ptr<detail::Node>> parents;
  parents.reserve(scalars.size());
  for (const auto& s : scalars) {
    if (!s.is_scalar()) {
      throw ShapeError("stack: all inputs must be scalars, got " +
                       shape_str(s.shape()));
    }
    parents.push_back(s.node());
  }
  Tensor out = detail::make_op({scalars.size()}, std::move(parents));
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    out.raw_values()[i] = scalars[i].values()[0];
  }
  if (out.requires_grad()) {
    out.node()->backward = [](detail::Node& self) {
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        detail::Node& P = *self.parents[i];
        if (!P.requires_grad) continue;
        P.ensure_grad();
        P.grad[0] += self.grad[i];
      }
    };
  }
  return out;
}

// --- backward ----------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls; intermediate gradients are reset per sweep so re-running backward on
// the same graph doubles only the leaves.
inline void backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (!root.is_scalar()) {
    throw ContractError("backward: root must be scalar, got shape " +
                        shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // iterative DFS post-order over requires_grad subgraph
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // post-order lists ancestors first; walking it backwards hits every node
  // before its parents
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->grad.assign((*it)->value.size(), 0.0);
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

// --- operator sugar ------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator+(double c, const Tensor& a) { return add(Tensor::scalar(c), a); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator-(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor operator/(const Tensor& a, double c) { return divide(a, Tensor::scalar(c)); }

}  // namespace dasm
