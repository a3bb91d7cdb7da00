#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every operation whose inputs carry requires_grad is appended to the
// thread-local active Tape. Tape::backward() walks the recorded entries in
// reverse and accumulates gradients into the inputs. Leaf gradients
// accumulate across backward() calls until they are zeroed (adam_step does
// that after every update).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dfad {

using Shape = std::vector<std::size_t>;

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS. Training allocates and frees the same large buffers every step; with
/// glibc defaults each one is a fresh mmap and the page faults dominate.
/// Call once at program start. No-op off glibc.
inline void retain_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OpKind {
  matmul,
  batched_matmul,
  transpose,
  add,
  subtract,
  multiply,
  divide,
  scalar_mul,
  add_scalar,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  row_softmax,
  row_log_softmax,
  exp,
  log,
  abs,
  pow,
  safe_reciprocal,
  sum,
  mean,
  sum_last_axis,
  masked_mean_rows,
  concat_rows,
  concat_cols,
  reshape,
  slice_rows,
  straight_through,
};

inline constexpr std::pair<OpKind, std::string_view> kOpKindNames[] = {
    {OpKind::matmul, "matmul"},
    {OpKind::batched_matmul, "batched-matmul"},
    {OpKind::transpose, "transpose"},
    {OpKind::add, "add"},
    {OpKind::subtract, "subtract"},
    {OpKind::multiply, "elementwise-mul"},
    {OpKind::divide, "divide"},
    {OpKind::scalar_mul, "scalar-mul"},
    {OpKind::add_scalar, "add-scalar"},
    {OpKind::relu, "relu"},
    {OpKind::leaky_relu, "leaky-relu"},
    {OpKind::tanh, "tanh"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::row_softmax, "row-softmax"},
    {OpKind::row_log_softmax, "row-log-softmax"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::abs, "absolute-value"},
    {OpKind::pow, "pow"},
    {OpKind::safe_reciprocal, "safe-reciprocal"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::sum_last_axis, "sum-last-axis"},
    {OpKind::masked_mean_rows, "masked-mean-rows"},
    {OpKind::concat_rows, "concat-rows"},
    {OpKind::concat_cols, "concat-cols"},
    {OpKind::reshape, "reshape"},
    {OpKind::slice_rows, "slice-rows"},
    {OpKind::straight_through, "straight-through"},
};

inline std::string_view to_string(OpKind kind) {
  for (const auto& [k, name] : kOpKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

inline OpKind op_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kOpKindNames) {
    if (n == name) return k;
  }
  throw std::invalid_argument("unknown operation kind '" + std::string(name) + "'");
}

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  std::optional<std::size_t> node_id;
  std::uint64_t tape_generation = 0;
};

/// Shared handle to a TensorNode. Copies alias the same storage; use
/// clone() for a deep copy.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) { node_->values.assign(1, 0.0); }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(numel(shape)) + " elements, got " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->values[i * n + i] = 1.0;
    return t;
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged rows in from_rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(v));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  /// Direct write access; used by optimizers and initializers only.
  std::span<double> mutable_values() { return node_->values; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
  }
  double at(std::size_t flat) const { return node_->values.at(flat); }
  double operator()(std::size_t i, std::size_t j) const {
    return node_->values[i * node_->shape.back() + j];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
  void clear_grad() { node_->grad.clear(); }

  std::optional<std::size_t> node_id() const { return node_->node_id; }

  /// Deep copy of values (and requires_grad flag); not attached to any tape.
  Tensor clone() const { return Tensor(shape(), node_->values, requires_grad()); }
  /// Values-only copy with requires_grad off.
  Tensor detach() const { return Tensor(shape(), node_->values, false); }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of differentiable operations for one training step.
class Tape {
 public:
  struct Entry;
  using BackwardFn = std::function<void(const Entry&)>;
  struct Entry {
    OpKind kind;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    BackwardFn backward;
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::uint64_t generation() const { return generation_; }

  bool holds(const TensorNode& node) const {
    return node.node_id && node.tape_generation == generation_ && *node.node_id < entries_.size() &&
           entries_[*node.node_id].output.get() == &node;
  }

  std::size_t record(OpKind kind, std::vector<std::shared_ptr<TensorNode>> inputs,
                     std::shared_ptr<TensorNode> output, BackwardFn fn) {
    std::size_t id = entries_.size();
    output->node_id = id;
    output->tape_generation = generation_;
    entries_.push_back(Entry{kind, std::move(inputs), std::move(output), std::move(fn)});
    return id;
  }

  /// Drops every recorded entry. Tensors produced under the old generation
  /// are no longer considered on-tape.
  void clear() {
    entries_.clear();
    ++generation_;
  }

  void backward(const Tensor& loss) {
    const TensorNode& root = *loss.node();
    if (loss.size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!holds(root)) throw std::logic_error("backward(): loss is not on the active tape");
    std::size_t last = *root.node_id;
    for (std::size_t i = 0; i <= last; ++i) {
      auto& out = *entries_[i].output;
      out.grad.assign(out.values.size(), 0.0);
    }
    entries_[last].output->grad[0] = 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
      const Entry& e = entries_[i];
      const auto& g = e.output->grad;
      if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) {
        // Nothing to propagate, but reachable inputs still get a (zero) buffer.
        for (const auto& in : e.inputs) detail_allocate_grad(*in);
        continue;
      }
      e.backward(e);
    }
  }

 private:
  static void detail_allocate_grad(TensorNode& node) {
    if (node.requires_grad && node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
  }

  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace detail {

/// Gradient buffer of an input node, allocated on first use; nullptr when
/// the node does not take gradients.
inline double* grad_buffer(const std::shared_ptr<TensorNode>& node) {
  if (!node->requires_grad) return nullptr;
  if (node->grad.empty()) node->grad.assign(node->values.size(), 0.0);
  return node->grad.data();
}

inline Tensor finish(OpKind kind, Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs, Tape::BackwardFn fn) {
  bool track = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor* t) { return t->requires_grad(); });
  Tensor out(std::move(shape), std::move(values), track);
  if (track) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const Tensor* t : inputs) nodes.push_back(t->node());
    Tape::active().record(kind, std::move(nodes), out.node(), std::move(fn));
  }
  return out;
}

inline Tensor finish_many(OpKind kind, Shape shape, std::vector<double> values,
                          std::span<const Tensor> inputs, Tape::BackwardFn fn) {
  bool track = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  Tensor out(std::move(shape), std::move(values), track);
  if (track) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const Tensor& t : inputs) nodes.push_back(t.node());
    Tape::active().record(kind, std::move(nodes), out.node(), std::move(fn));
  }
  return out;
}

// C[m,n] (+)= op(A) * op(B) with A,B row-major.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (trans_a && !trans_b) {
    // A stored k x m
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + p * m;
      const double* brow = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        double av = arow[i];
        if (av == 0.0) continue;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // B stored n x k. Transposing once keeps the inner loop a contiguous
    // axpy, which vectorises; a dot-product loop would not.
    std::vector<double> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm(a, bt.data(), c, m, k, n, false, false);
  } else {
    std::vector<double> at(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
    gemm(at.data(), b, c, m, k, n, false, true);
  }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(to_string(kind)) + ": cannot broadcast shapes " +
                       shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For each output flat index, the flat index into a (possibly broadcast)
// operand of shape `in`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    std::size_t oi = i + (r - in.size());
    stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t f = 0; f < n; ++f) {
    idx[f] = cur;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

// Elementwise binary op with broadcasting. `df` returns {d/da, d/db}.
template <class F, class DF>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, DF df) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return finish(kind, a.shape(), std::move(out), {&a, &b}, [df](const Tape::Entry& e) {
      const auto& g = e.output->grad;
      const auto& x = e.inputs[0]->values;
      const auto& y = e.inputs[1]->values;
      double* ga = grad_buffer(e.inputs[0]);
      double* gb = grad_buffer(e.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        auto [da, db] = df(x[i], y[i]);
        if (ga) ga[i] += g[i] * da;
        if (gb) gb[i] += g[i] * db;
      }
    });
  }
  Shape shape = broadcast_shape(a.shape(), b.shape(), kind);
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), shape));
  std::vector<double> out(numel(shape));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[(*ia)[i]], bv[(*ib)[i]]);
  return finish(kind, shape, std::move(out), {&a, &b}, [df, ia, ib](const Tape::Entry& e) {
    const auto& g = e.output->grad;
    const auto& x = e.inputs[0]->values;
    const auto& y = e.inputs[1]->values;
    double* ga = grad_buffer(e.inputs[0]);
    double* gb = grad_buffer(e.inputs[1]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      auto [da, db] = df(x[(*ia)[i]], y[(*ib)[i]]);
      if (ga) ga[(*ia)[i]] += g[i] * da;
      if (gb) gb[(*ib)[i]] += g[i] * db;
    }
  });
}

// Elementwise unary op. `df(x, y)` is the derivative given input x and output y.
template <class F, class DF>
Tensor unary(OpKind kind, const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return finish(kind, x.shape(), std::move(out), {&x}, [df](const Tape::Entry& e) {
    const auto& g = e.output->grad;
    const auto& in = e.inputs[0]->values;
    const auto& y = e.output->values;
    double* gx = grad_buffer(e.inputs[0]);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(in[i], y[i]);
  });
}

inline std::size_t last_dim(const Tensor& t, OpKind kind) {
  if (t.rank() == 0) throw ShapeError(std::string(to_string(kind)) + ": needs rank >= 1");
  return t.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm(a.values().data(), b.values().data(), out.data(), m, k, n, false, false);
  return detail::finish(OpKind::matmul, {m, n}, std::move(out), {&a, &b},
                        [m, k, n](const Tape::Entry& e) {
                          const double* g = e.output->grad.data();
                          if (double* ga = detail::grad_buffer(e.inputs[0]))
                            detail::gemm(g, e.inputs[1]->values.data(), ga, m, n, k, false, true);
                          if (double* gb = detail::grad_buffer(e.inputs[1]))
                            detail::gemm(e.inputs[0]->values.data(), g, gb, k, m, n, true, false);
                        });
}

/// [B, m, k] x [B, k, n] -> [B, m, n]
inline Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("batched-matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t s = 0; s < bs; ++s) {
    detail::gemm(a.values().data() + s * m * k, b.values().data() + s * k * n,
                 out.data() + s * m * n, m, k, n, false, false);
  }
  return detail::finish(
      OpKind::batched_matmul, {bs, m, n}, std::move(out), {&a, &b},
      [bs, m, k, n](const Tape::Entry& e) {
        const double* g = e.output->grad.data();
        double* ga = detail::grad_buffer(e.inputs[0]);
        double* gb = detail::grad_buffer(e.inputs[1]);
        for (std::size_t s = 0; s < bs; ++s) {
          if (ga)
            detail::gemm(g + s * m * n, e.inputs[1]->values.data() + s * k * n, ga + s * m * k, m,
                         n, k, false, true);
          if (gb)
            detail::gemm(e.inputs[0]->values.data() + s * m * k, g + s * m * n, gb + s * k * n, k,
                         m, n, true, false);
        }
      });
}

/// Swaps the last two axes (rank 2 or 3).
inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("transpose: needs rank 2 or 3, got " + shape_str(x.shape()));
  }
  std::size_t bs = x.rank() == 3 ? x.dim(0) : 1;
  std::size_t r = x.shape()[x.rank() - 2], c = x.shape().back();
  std::vector<double> out(x.size());
  auto v = x.values();
  for (std::size_t s = 0; s < bs; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = v[s * r * c + i * c + j];
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  return detail::finish(OpKind::transpose, shape, std::move(out), {&x},
                        [bs, r, c](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          for (std::size_t s = 0; s < bs; ++s)
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j)
                                gx[s * r * c + i * c + j] += g[s * r * c + j * r + i];
                        });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::subtract, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::multiply, a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::divide, a, b, [](double x, double y) { return x / y; },
      [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

inline Tensor scalar_mul(const Tensor& x, double s) {
  return detail::unary(
      OpKind::scalar_mul, x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      OpKind::add_scalar, x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary(
      OpKind::leaky_relu, x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      OpKind::tanh, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      OpKind::sigmoid, x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      OpKind::log, x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

/// |x|; the backward pass uses subgradient 0 at x == 0.
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      OpKind::abs, x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor pow(const Tensor& x, double p) {
  return detail::unary(
      OpKind::pow, x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

/// 1/x for x > 0, otherwise 0 (used for mean aggregation over possibly
/// empty neighbourhoods).
inline Tensor safe_reciprocal(const Tensor& x) {
  return detail::unary(
      OpKind::safe_reciprocal, x, [](double v) { return v > 0.0 ? 1.0 / v : 0.0; },
      [](double v, double) { return v > 0.0 ? -1.0 / (v * v) : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise normalisation

inline Tensor sum(const Tensor& x) {
  auto v = x.values();
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  return detail::finish(OpKind::sum, {}, {s}, {&x}, [](const Tape::Entry& e) {
    double* gx = detail::grad_buffer(e.inputs[0]);
    if (!gx) return;
    double g = e.output->grad[0];
    for (std::size_t i = 0; i < e.inputs[0]->values.size(); ++i) gx[i] += g;
  });
}

inline Tensor mean(const Tensor& x) {
  auto v = x.values();
  double n = static_cast<double>(v.size());
  double s = std::accumulate(v.begin(), v.end(), 0.0) / n;
  return detail::finish(OpKind::mean, {}, {s}, {&x}, [n](const Tape::Entry& e) {
    double* gx = detail::grad_buffer(e.inputs[0]);
    if (!gx) return;
    double g = e.output->grad[0] / n;
    for (std::size_t i = 0; i < e.inputs[0]->values.size(); ++i) gx[i] += g;
  });
}

/// Sum over the last axis, keeping it with extent 1.
inline Tensor sum_last_axis(const Tensor& x) {
  std::size_t c = detail::last_dim(x, OpKind::sum_last_axis);
  std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  std::vector<double> out(rows, 0.0);
  auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r] += v[r * c + j];
  Shape shape = x.shape();
  shape.back() = 1;
  return detail::finish(OpKind::sum_last_axis, shape, std::move(out), {&x},
                        [rows, c](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r];
                        });
}

/// Softmax along the last axis.
inline Tensor row_softmax(const Tensor& x) {
  std::size_t c = detail::last_dim(x, OpKind::row_softmax);
  std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * c;
    double m = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += out[r * c + j] = std::exp(in[j] - m);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  return detail::finish(OpKind::row_softmax, x.shape(), std::move(out), {&x},
                        [rows, c](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          const auto& y = e.output->values;
                          for (std::size_t r = 0; r < rows; ++r) {
                            double dot = 0.0;
                            for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                          }
                        });
}

/// Log-softmax along the last axis (log-sum-exp stabilised).
inline Tensor row_log_softmax(const Tensor& x) {
  std::size_t c = detail::last_dim(x, OpKind::row_log_softmax);
  std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * c;
    double m = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - m);
    double lse = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = in[j] - lse;
  }
  return detail::finish(OpKind::row_log_softmax, x.shape(), std::move(out), {&x},
                        [rows, c](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          const auto& y = e.output->values;
                          for (std::size_t r = 0; r < rows; ++r) {
                            double gs = 0.0;
                            for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
                            for (std::size_t j = 0; j < c; ++j)
                              gx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gs;
                          }
                        });
}

/// Mean over the rows selected by a 0/1 mask.
///   x [N, h], mask [N]      -> [1, h]
///   x [B, N, h], mask [B, N] -> [B, h]
/// The mask is treated as a constant. A group with an empty mask yields zeros.
inline Tensor masked_mean_rows(const Tensor& x, const Tensor& mask) {
  std::size_t groups, n, h;
  if (x.rank() == 2 && mask.rank() == 1 && mask.dim(0) == x.dim(0)) {
    groups = 1, n = x.dim(0), h = x.dim(1);
  } else if (x.rank() == 3 && mask.rank() == 2 && mask.dim(0) == x.dim(0) &&
             mask.dim(1) == x.dim(1)) {
    groups = x.dim(0), n = x.dim(1), h = x.dim(2);
  } else {
    throw ShapeError("masked-mean-rows: incompatible shapes " + shape_str(x.shape()) +
                     " and mask " + shape_str(mask.shape()));
  }
  auto scale = std::make_shared<std::vector<double>>(groups, 0.0);
  auto w = std::make_shared<std::vector<double>>(mask.values().begin(), mask.values().end());
  for (std::size_t b = 0; b < groups; ++b) {
    double cnt = 0.0;
    for (std::size_t i = 0; i < n; ++i) cnt += (*w)[b * n + i];
    (*scale)[b] = cnt > 0.0 ? 1.0 / cnt : 0.0;
  }
  std::vector<double> out(groups * h, 0.0);
  auto v = x.values();
  for (std::size_t b = 0; b < groups; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      double wi = (*w)[b * n + i];
      if (wi == 0.0) continue;
      for (std::size_t j = 0; j < h; ++j) out[b * h + j] += wi * v[(b * n + i) * h + j];
    }
  for (std::size_t b = 0; b < groups; ++b)
    for (std::size_t j = 0; j < h; ++j) out[b * h + j] *= (*scale)[b];
  return detail::finish(OpKind::masked_mean_rows, {groups, h}, std::move(out), {&x, &mask},
                        [groups, n, h, scale, w](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          for (std::size_t b = 0; b < groups; ++b)
                            for (std::size_t i = 0; i < n; ++i) {
                              double wi = (*w)[b * n + i] * (*scale)[b];
                              if (wi == 0.0) continue;
                              for (std::size_t j = 0; j < h; ++j)
                                gx[(b * n + i) * h + j] += wi * g[b * h + j];
                            }
                        });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenates along axis 0; all trailing extents must agree.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat-rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat-rows: shape " + shape_str(p.shape()) + " does not match " +
                       shape_str(parts[0].shape()));
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.dim(0);
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::finish_many(OpKind::concat_rows, shape, std::move(out), parts,
                             [offsets](const Tape::Entry& e) {
                               const auto& g = e.output->grad;
                               for (std::size_t i = 0; i < e.inputs.size(); ++i) {
                                 double* gi = detail::grad_buffer(e.inputs[i]);
                                 if (!gi) continue;
                                 for (std::size_t j = 0; j < e.inputs[i]->values.size(); ++j)
                                   gi[j] += g[offsets[i] + j];
                               }
                             });
}

/// Concatenates along the last axis; all leading extents must agree.
inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat-cols: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::size_t rows = numel(lead), total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin(), p.shape().end() - 1) != lead) {
      throw ShapeError("concat-cols: shape " + shape_str(p.shape()) + " does not match " +
                       shape_str(parts[0].shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto v = parts[i].values();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  Shape shape = lead;
  shape.push_back(total);
  return detail::finish_many(OpKind::concat_cols, shape, std::move(out), parts,
                             [widths, rows, total](const Tape::Entry& e) {
                               const auto& g = e.output->grad;
                               std::size_t off = 0;
                               for (std::size_t i = 0; i < e.inputs.size(); ++i) {
                                 if (double* gi = detail::grad_buffer(e.inputs[i])) {
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t j = 0; j < widths[i]; ++j)
                                       gi[r * widths[i] + j] += g[r * total + off + j];
                                 }
                                 off += widths[i];
                               }
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::finish(OpKind::reshape, std::move(shape), std::move(out), {&x},
                        [](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

/// Rows [begin, end) along axis 0.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    throw ShapeError("slice-rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_str(x.shape()));
  }
  std::size_t stride = x.size() / x.dim(0);
  std::vector<double> out(x.values().begin() + begin * stride, x.values().begin() + end * stride);
  Shape shape = x.shape();
  shape[0] = end - begin;
  return detail::finish(OpKind::slice_rows, shape, std::move(out), {&x},
                        [begin, stride](const Tape::Entry& e) {
                          double* gx = detail::grad_buffer(e.inputs[0]);
                          if (!gx) return;
                          const auto& g = e.output->grad;
                          for (std::size_t i = 0; i < g.size(); ++i) gx[begin * stride + i] += g[i];
                        });
}

/// Forward value of `forward_values`, gradient routed unchanged into `soft`.
inline Tensor straight_through(const Tensor& forward_values, const Tensor& soft) {
  if (forward_values.shape() != soft.shape()) {
    throw ShapeError("straight-through: shapes " + shape_str(forward_values.shape()) + " and " +
                     shape_str(soft.shape()) + " differ");
  }
  std::vector<double> out(forward_values.values().begin(), forward_values.values().end());
  return detail::finish(OpKind::straight_through, soft.shape(), std::move(out), {&soft},
                        [](const Tape::Entry& e) {
                          double* gs = detail::grad_buffer(e.inputs[0]);
                          if (!gs) return;
                          const auto& g = e.output->grad;
                          for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Generic dispatch by kind (used by tests and tooling that iterate kinds).

struct OpAttrs {
  double scalar = 0.0;
  Shape shape;
  std::size_t begin = 0, end = 0;
};

inline Tensor op_forward(OpKind kind, std::span<const Tensor> in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(to_string(kind)) + ": expects " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::batched_matmul: need(2); return batched_matmul(in[0], in[1]);
    case OpKind::transpose: need(1); return transpose(in[0]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::subtract: need(2); return sub(in[0], in[1]);
    case OpKind::multiply: need(2); return mul(in[0], in[1]);
    case OpKind::divide: need(2); return div(in[0], in[1]);
    case OpKind::scalar_mul: need(1); return scalar_mul(in[0], attrs.scalar);
    case OpKind::add_scalar: need(1); return add_scalar(in[0], attrs.scalar);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::leaky_relu: need(1); return leaky_relu(in[0], attrs.scalar);
    case OpKind::tanh: need(1); return tanh(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::row_softmax: need(1); return row_softmax(in[0]);
    case OpKind::row_log_softmax: need(1); return row_log_softmax(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::pow: need(1); return pow(in[0], attrs.scalar);
    case OpKind::safe_reciprocal: need(1); return safe_reciprocal(in[0]);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::sum_last_axis: need(1); return sum_last_axis(in[0]);
    case OpKind::masked_mean_rows: need(2); return masked_mean_rows(in[0], in[1]);
    case OpKind::concat_rows: return concat_rows(in);
    case OpKind::concat_cols: return concat_cols(in);
    case OpKind::reshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::slice_rows: need(1); return slice_rows(in[0], attrs.begin, attrs.end);
    case OpKind::straight_through: need(2); return straight_through(in[0], in[1]);
  }
  throw std::invalid_argument("unknown operation kind");
}

}  // namespace dfad
