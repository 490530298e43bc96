#pragma once

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every operation on tensors that require gradients records its inputs and a
// local backward rule on the output node. backward() sorts the reachable graph
// topologically and runs each rule exactly once in reverse order.
//
// Gradient buffers of differentiable leaves must be cleared with zero_grad()
// before the next backward pass; a second backward into a populated leaf is a
// ContractError rather than a silent accumulation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sata/errors.hpp"

namespace sata {

using Shape = std::vector<std::size_t>;

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kNormEpsilon = 1e-12;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
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
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;  // set on a root once backward() has run from it
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double fill) {
    const std::size_t n = shape_size(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, fill), false);
  }
  static Tensor scalar(double v) { return constant({}, {v}); }
  static Tensor identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return constant({n, n}, std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  /// Rows of the matrix view: rank 0 and 1 are a single row.
  std::size_t rows() const {
    const auto& s = node_->shape;
    return s.size() == 2 ? s[0] : 1;
  }
  std::size_t cols() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    return s.back();
  }

  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }

  /// Values of a leaf. Only optimizers and test fixtures write through this.
  std::span<double> mutable_data() {
    if (!node_->leaf) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->value;
  }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw ContractError("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return make_leaf(node_->shape, node_->value, requires_grad);
  }
  Tensor detach() const { return clone(false); }

  /// Identity of the underlying node.
  const void* id() const { return node_.get(); }

  // internal
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank <= 2, got " + shape_string(t.shape()));
  }
}

/// Creates the output node. The backward rule is kept only when some input
/// participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->leaf = false;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const std::shared_ptr<Node>& n) { return n->requires_grad; }

struct Broadcast {
  std::size_t rows, cols, ar, ac, br, bc;
  Shape shape;
};

inline Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  require_matrix(a, op);
  require_matrix(b, op);
  Broadcast bc{};
  bc.ar = a.rows();
  bc.ac = a.cols();
  bc.br = b.rows();
  bc.bc = b.cols();
  bc.rows = std::max(bc.ar, bc.br);
  bc.cols = std::max(bc.ac, bc.bc);
  const bool ok = (bc.ar == bc.rows || bc.ar == 1) && (bc.br == bc.rows || bc.br == 1) &&
                  (bc.ac == bc.cols || bc.ac == 1) && (bc.bc == bc.cols || bc.bc == 1);
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) +
                         " with " + shape_string(b.shape()));
  }
  if (a.size() == bc.rows * bc.cols) {
    bc.shape = a.shape();
  } else if (b.size() == bc.rows * bc.cols) {
    bc.shape = b.shape();
  } else {
    bc.shape = {bc.rows, bc.cols};
  }
  return bc;
}

inline std::size_t bindex(std::size_t r, std::size_t c, std::size_t nr, std::size_t nc) {
  return (nr == 1 ? 0 : r) * nc + (nc == 1 ? 0 : c);
}

/// Elementwise binary op with 2-D broadcasting. `da`/`db` give the partial
/// derivatives of f at (x, y).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  const Broadcast bc = broadcast(a, b, op);
  std::vector<double> out(bc.rows * bc.cols);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t r = 0; r < bc.rows; ++r) {
    for (std::size_t c = 0; c < bc.cols; ++c) {
      out[r * bc.cols + c] = f(av[bindex(r, c, bc.ar, bc.ac)], bv[bindex(r, c, bc.br, bc.bc)]);
    }
  }
  return make_result(bc.shape, std::move(out), {a, b}, [bc, da, db](Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    const auto& g = self.grad;
    std::span<double> ga, gb;
    if (wants_grad(na)) ga = na->grad_buffer();
    if (wants_grad(nb)) gb = nb->grad_buffer();
    for (std::size_t r = 0; r < bc.rows; ++r) {
      for (std::size_t c = 0; c < bc.cols; ++c) {
        const std::size_t ia = bindex(r, c, bc.ar, bc.ac);
        const std::size_t ib = bindex(r, c, bc.br, bc.bc);
        const double x = na->value[ia];
        const double y = nb->value[ib];
        const double go = g[r * bc.cols + c];
        if (!ga.empty()) ga[ia] += go * da(x, y);
        if (!gb.empty()) gb[ib] += go * db(x, y);
      }
    }
  });
}

/// Elementwise unary op; `d(x, y)` is the derivative given input and output.
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D d) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [d](Node& self) {
    auto& na = self.inputs[0];
    auto ga = na->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += self.grad[i] * d(na->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "subtract", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "multiply", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "divide", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return subtract(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return multiply(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// log(max(x, eps)); never returns -inf or NaN for finite input.
inline Tensor log(const Tensor& a, double eps = kLogClamp) {
  return detail::unary(
      a,
      [eps](double x) {
        if (std::isnan(x)) throw NumericError("log: NaN input");
        return std::log(std::max(x, eps));
      },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        if (!(x >= 0.0)) throw NumericError("sqrt: negative or NaN input");
        return std::sqrt(x);
      },
      [](double, double y) { return 0.5 / y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all entries as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  const auto v = a.data();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
    auto ga = self.inputs[0]->grad_buffer();
    for (auto& g : ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sum over one axis of the matrix view, keeping it as extent 1:
/// axis 0 gives [1 x cols], axis 1 gives [rows x 1].
inline Tensor sum(const Tensor& a, int axis) {
  detail::require_matrix(a, "sum");
  if (axis != 0 && axis != 1) throw DimensionError("sum: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const auto v = a.data();
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  std::vector<double> out(axis == 0 ? c : r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += v[i * c + j];
  return detail::make_result(std::move(shape), std::move(out), {a},
                             [r, c, axis](detail::Node& self) {
                               auto ga = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   ga[i * c + j] += self.grad[axis == 0 ? j : i];
                             });
}

inline Tensor mean(const Tensor& a, int axis) {
  const double n = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return scale(sum(a, axis), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Matrix operations

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& na = self.inputs[0];
    auto& nb = self.inputs[1];
    const auto& g = self.grad;
    if (detail::wants_grad(na)) {
      // dA = G * B^T
      auto ga = na->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = nb->value.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (detail::wants_grad(nb)) {
      // dB = A^T * G
      auto gb = nb->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = na->value[i * k + p];
          if (x == 0.0) continue;
          const double* grow = g.data() + i * n;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += x * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  const auto v = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return detail::make_result({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    auto ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

/// Stacks matrices with equal column counts along the batch axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) +
                           " vs " + shape_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result({total, c}, std::move(out), parts,
                             [offsets](detail::Node& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 auto& in = self.inputs[k];
                                 if (!detail::wants_grad(in)) continue;
                                 auto gi = in->grad_buffer();
                                 for (std::size_t i = 0; i < gi.size(); ++i)
                                   gi[i] += self.grad[offsets[k] + i];
                               }
                             });
}

/// Row-wise dot products of two [N x d] matrices, as [N x 1].
inline Tensor row_dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError("row_dot: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  return sum(multiply(a, b), 1);
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Tensor softmax(const Tensor& logits) {
  detail::require_matrix(logits, "softmax");
  const std::size_t r = logits.rows(), c = logits.cols();
  const auto v = logits.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = v.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax: NaN input");
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return detail::make_result(logits.shape(), std::move(out), {logits},
                             [r, c](detail::Node& self) {
                               auto ga = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i) {
                                 const double* y = self.value.data() + i * c;
                                 const double* g = self.grad.data() + i * c;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   ga[i * c + j] += y[j] * (g[j] - dot);
                               }
                             });
}

inline Tensor log_softmax(const Tensor& logits) {
  detail::require_matrix(logits, "log_softmax");
  const std::size_t r = logits.rows(), c = logits.cols();
  const auto v = logits.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = v.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (std::isnan(row[j])) throw NumericError("log_softmax: NaN input");
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return detail::make_result(logits.shape(), std::move(out), {logits},
                             [r, c](detail::Node& self) {
                               auto ga = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < r; ++i) {
                                 const double* y = self.value.data() + i * c;
                                 const double* g = self.grad.data() + i * c;
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < c; ++j) gs += g[j];
                                 for (std::size_t j = 0; j < c; ++j)
                                   ga[i * c + j] += g[j] - std::exp(y[j]) * gs;
                               }
                             });
}

/// Projects each row onto the unit sphere.
inline Tensor l2_normalize(const Tensor& v) {
  detail::require_matrix(v, "l2_normalize");
  const std::size_t r = v.rows(), c = v.cols();
  const auto x = v.data();
  std::vector<double> out(r * c);
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += x[i * c + j] * x[i * c + j];
    const double n = std::sqrt(ss);
    if (!(n > kNormEpsilon)) {
      throw DegenerateVectorError("l2_normalize: row " + std::to_string(i) + " has norm " +
                                  std::to_string(n));
    }
    norms[i] = n;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / n;
  }
  return detail::make_result(
      v.shape(), std::move(out), {v}, [r, c, norms = std::move(norms)](detail::Node& self) {
        auto ga = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
          const double* y = self.value.data() + i * c;
          const double* g = self.grad.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[j] - y[j] * dot) / norms[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Differentiation

/// Reverse topological order of every node reachable from `root` that
/// participates in differentiation.
inline std::vector<detail::Node*> topological_order(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

/// Populates gradients of every differentiable leaf reachable from `loss`.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  auto& root = *loss.node();
  if (!root.requires_grad) throw ContractError("backward: loss does not depend on any parameter");
  if (root.consumed) throw ContractError("backward: graph already differentiated");
  const auto order = topological_order(loss);
  for (auto* n : order) {
    if (n->leaf && !n->grad.empty()) {
      throw ContractError("backward: leaf gradient not zeroed since the previous pass");
    }
  }
  root.consumed = true;
  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root.grad[0] = 1.0;
  for (auto* n : order) {
    if (n->leaf) {
      n->grad_buffer();  // every reachable leaf ends up populated
      continue;
    }
    if (n->backward_fn) n->backward_fn(*n);
  }
  for (auto* n : order) {
    if (!n->leaf) n->grad.clear();
  }
}

inline void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace sata
