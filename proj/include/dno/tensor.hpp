#pragma once

// Dense arrays with a reverse-mode recording graph.
//
// A Tensor is an immutable, shape-tagged buffer. Applying a primitive to a
// tensor that belongs to a Graph records one node in that graph; applying it
// to plain tensors records nothing. Graph::backward walks the nodes in reverse
// creation order, which is a valid reverse topological order because inputs
// always exist before the nodes that consume them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dno/kernels.hpp"

namespace dno::tg {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Graph;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape) : Tensor(shape, std::vector<T>(numel_of(shape), T(0))) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    if (data_->size() != numel_of(shape_))
      throw ShapeError("data length " + std::to_string(data_->size()) + " does not match shape " +
                       to_string(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }
  static Tensor full(Shape shape, T v) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::span<const T> data() const noexcept { return *data_; }
  const T& operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }
  std::vector<T> to_vector() const { return *data_; }

  /// Copy-on-write access. Only unrecorded tensors may be mutated.
  std::span<T> mutable_data() {
    if (recorded()) throw GraphError("cannot mutate a recorded tensor");
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return *data_;
  }

  bool recorded() const noexcept { return graph_ != nullptr; }
  Graph<T>* graph() const noexcept { return graph_; }
  NodeId node() const noexcept { return node_; }

  /// Same values, no graph membership.
  Tensor detach() const {
    Tensor out = *this;
    out.graph_ = nullptr;
    out.node_ = kNoNode;
    return out;
  }

  /// Bit-level equality of shape and data.
  bool identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(data_->begin(), data_->end(), other.data_->begin(), other.data_->end(),
                      [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
  }

 private:
  friend class Graph<T>;
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Graph<T>* graph_ = nullptr;
  NodeId node_ = kNoNode;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  MatMul,
  Silu,
  Concat,
  Reshape,
  Sum,
  Mean,
  Gather,
  AvgPool2,
  Abs,
  Square,
  MinConst,
  Sqrt,
  Segment,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Mul: return "multiply";
    case Op::Scale: return "scalar-multiply";
    case Op::MatMul: return "matmul";
    case Op::Silu: return "silu";
    case Op::Concat: return "concat";
    case Op::Reshape: return "reshape";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Gather: return "gather";
    case Op::AvgPool2: return "avgpool2";
    case Op::Abs: return "abs";
    case Op::Square: return "square";
    case Op::MinConst: return "min-const";
    case Op::Sqrt: return "sqrt";
    case Op::Segment: return "segment";
  }
  return "?";
}

/// Reduction extent for sum/mean.
enum class Axis : std::uint8_t { All, Last };

template <class T>
using SegmentFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Gradients keyed by the node id of each gradient-requiring leaf.
template <class T>
class GradientMap {
 public:
  bool contains(const Tensor<T>& leaf) const { return grads_.count(leaf.node()) != 0; }
  const Tensor<T>& at(const Tensor<T>& leaf) const { return at(leaf.node()); }
  const Tensor<T>& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw GraphError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  std::size_t size() const noexcept { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  void insert(NodeId id, Tensor<T> g) { grads_.insert_or_assign(id, std::move(g)); }

 private:
  std::map<NodeId, Tensor<T>> grads_;
};

template <class T>
class Graph {
 public:
  /// Per-primitive parameters kept for the reverse pass.
  struct Aux {
    T scalar = T(0);
    Axis axis = Axis::All;
    std::vector<std::size_t> index;
    std::vector<std::size_t> extents;  // concat split sizes
    SegmentFn<T> segment;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers `value` as a leaf. Leaves requiring gradients receive an entry
  /// in every GradientMap produced by backward().
  Tensor<T> leaf(const Tensor<T>& value, bool requires_grad = true) {
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    return push(std::move(n), value.detach());
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Largest number of simultaneously retained node values observed so far,
  /// including nodes of re-executed checkpoint segments.
  std::size_t peak_retained() const noexcept { return std::max(peak_, nodes_.size()); }

  /// Appends a node for `op` applied to `inputs` with forward result `value`.
  /// Used by the primitive functions; callers normally go through those.
  Tensor<T> add_node(const Tensor<T>& value, Op op, const std::vector<Tensor<T>>& inputs, Aux aux) {
    return add_node_impl(value, op, inputs, std::move(aux));
  }

  GradientMap<T> backward(const Tensor<T>& root) {
    if (root.graph() != this) throw GraphError("backward: root is not recorded in this graph");
    if (root.numel() != 1)
      throw GraphError("backward: root must be scalar, got shape " + to_string(root.shape()));
    return backward_seeded(root, Tensor<T>::full(root.shape(), T(1)));
  }

  /// Reverse pass from `root` seeded with `seed` (same shape as root).
  GradientMap<T> backward_seeded(const Tensor<T>& root, const Tensor<T>& seed) {
    if (root.graph() != this) throw GraphError("backward: root is not recorded in this graph");
    if (seed.shape() != root.shape()) throw ShapeError("backward: seed shape mismatch");
    std::vector<std::optional<std::vector<T>>> grads(nodes_.size());
    grads[root.node()] = seed.to_vector();
    GradientMap<T> out;
    for (NodeId id = root.node() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!grads[id]) {
        if (n.op == Op::Leaf && n.requires_grad) out.insert(id, Tensor<T>(n.value.shape()));
        continue;
      }
      std::vector<T> g = std::move(*grads[id]);
      grads[id].reset();
      if (n.op == Op::Leaf) {
        if (n.requires_grad) out.insert(id, Tensor<T>(n.value.shape(), std::move(g)));
        continue;
      }
      propagate(n, g, grads);
    }
    for (NodeId id = root.node() + 1; id < nodes_.size(); ++id)
      if (nodes_[id].op == Op::Leaf && nodes_[id].requires_grad)
        out.insert(id, Tensor<T>(nodes_[id].value.shape()));
    return out;
  }

 private:
  struct Node {
    Op op = Op::Leaf;
    bool requires_grad = false;
    Tensor<T> value;
    std::vector<Tensor<T>> inputs;  // detached copies; node id kept separately
    std::vector<NodeId> input_ids;  // kNoNode for constants
    Aux aux;
  };

  Tensor<T> push(Node n, Tensor<T> value) {
    n.value = value;
    nodes_.push_back(std::move(n));
    value.graph_ = this;
    value.node_ = nodes_.size() - 1;
    peak_ = std::max(peak_, nodes_.size());
    return value;
  }

  Tensor<T> add_node_impl(const Tensor<T>& value, Op op, const std::vector<Tensor<T>>& inputs, Aux aux) {
    Node n;
    n.op = op;
    n.aux = std::move(aux);
    for (const auto& in : inputs) {
      n.inputs.push_back(in.detach());
      n.input_ids.push_back(in.graph() == this ? in.node() : kNoNode);
    }
    return push(std::move(n), value.detach());
  }

  static void accumulate(std::optional<std::vector<T>>& slot, std::vector<T>&& g) {
    if (!slot) {
      slot = std::move(g);
      return;
    }
    auto& s = *slot;
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
  }

  // Reduces a gradient of the broadcast output shape onto an operand shape.
  static std::vector<T> unbroadcast(const std::vector<T>& g, std::size_t operand_numel) {
    if (operand_numel == g.size()) return g;
    std::vector<T> r(operand_numel, T(0));
    for (std::size_t o = 0; o < g.size(); o += operand_numel)
      for (std::size_t j = 0; j < operand_numel; ++j) r[j] += g[o + j];
    return r;
  }

  void propagate(const Node& n, const std::vector<T>& g,
                 std::vector<std::optional<std::vector<T>>>& grads);

  std::vector<Node> nodes_;
  std::size_t peak_ = 0;
};

template <class T>
Tensor<T> record(const Tensor<T>& value, Op op, std::vector<Tensor<T>> inputs,
                 typename Graph<T>::Aux aux = {}) {
  Graph<T>* g = nullptr;
  for (const auto& in : inputs) {
    if (!in.recorded()) continue;
    if (g && in.graph() != g)
      throw GraphError(std::string(op_name(op)) + ": inputs belong to different graphs");
    g = in.graph();
  }
  if (!g) return value;
  return g->add_node(value, op, inputs, std::move(aux));
}

namespace detail {

template <class T>
[[noreturn]] void shape_fail(Op op, const Tensor<T>& a, const Tensor<T>& b, const char* why) {
  throw ShapeError(std::string(op_name(op)) + ": " + why + " (" + to_string(a.shape()) + " vs " +
                   to_string(b.shape()) + ")");
}

// b broadcasts onto a when it is a scalar or matches a's trailing extents.
template <class T>
bool broadcasts_onto(const Tensor<T>& big, const Tensor<T>& small) {
  if (small.numel() == 1) return true;
  const auto& bs = big.shape();
  const auto& ss = small.shape();
  if (ss.size() > bs.size()) return false;
  return std::equal(ss.begin(), ss.end(), bs.end() - static_cast<std::ptrdiff_t>(ss.size()));
}

template <class T, class F>
Tensor<T> binary(Op op, const Tensor<T>& a, const Tensor<T>& b, F f) {
  const bool same = a.shape() == b.shape();
  if (!same && !broadcasts_onto(a, b) && !broadcasts_onto(b, a))
    shape_fail(op, a, b, "shapes do not conform");
  const bool a_big = same || a.numel() >= b.numel();
  const Tensor<T>& big = a_big ? a : b;
  const std::size_t na = a.numel(), nb = b.numel(), n = big.numel();
  std::vector<T> out(n);
  auto ad = a.data();
  auto bd = b.data();
  if (na == nb) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
  } else if (na == n) {
    for (std::size_t o = 0; o < n; o += nb)
      for (std::size_t j = 0; j < nb; ++j) out[o + j] = f(ad[o + j], bd[j]);
  } else {
    for (std::size_t o = 0; o < n; o += na)
      for (std::size_t j = 0; j < na; ++j) out[o + j] = f(ad[j], bd[o + j]);
  }
  return record(Tensor<T>(big.shape(), std::move(out)), op, {a, b});
}

template <class T, class F>
Tensor<T> unary(Op op, const Tensor<T>& a, F f, typename Graph<T>::Aux aux = {}) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return record(Tensor<T>(a.shape(), std::move(out)), op, {a}, std::move(aux));
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(Op::Add, a, b, [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(Op::Sub, a, b, [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(Op::Mul, a, b, [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  typename Graph<T>::Aux aux;
  aux.scalar = c;
  return detail::unary(Op::Scale, a, [c](T x) { return c * x; }, std::move(aux));
}

/// [n,k] x [k,m] -> [n,m]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) detail::shape_fail(Op::MatMul, a, b, "operands must be 2-D");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) detail::shape_fail(Op::MatMul, a, b, "inner extents differ");
  std::vector<T> out(n * m);
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return record(Tensor<T>(Shape{n, m}, std::move(out)), Op::MatMul, {a, b});
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary(Op::Silu, a, [](T x) { return x * detail::sigmoid(x); });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  const std::size_t outer = numel_of(s0) / s0.back();
  typename Graph<T>::Aux aux;
  std::size_t last = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin()))
      detail::shape_fail(Op::Concat, parts.front(), p, "leading extents differ");
    aux.extents.push_back(s.back());
    last += s.back();
  }
  std::vector<T> out(outer * last);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * w, w, out.data() + o * last + off);
    off += w;
  }
  Shape shape = s0;
  shape.back() = last;
  return record(Tensor<T>(std::move(shape), std::move(out)), Op::Concat, parts, std::move(aux));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  std::vector<T> data(a.data().begin(), a.data().end());
  return record(Tensor<T>(std::move(shape), std::move(data)), Op::Reshape, {a});
}

namespace detail {
template <class T>
Tensor<T> reduce(Op op, const Tensor<T>& a, Axis axis) {
  const std::size_t inner = axis == Axis::All ? a.numel() : a.shape().back();
  const std::size_t outer = a.numel() / inner;
  std::vector<T> out(outer, T(0));
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    T s = T(0);
    for (std::size_t i = 0; i < inner; ++i) s += ad[o * inner + i];
    out[o] = op == Op::Mean ? s / static_cast<T>(inner) : s;
  }
  Shape shape{1};
  if (axis == Axis::Last && a.rank() > 1) shape.assign(a.shape().begin(), a.shape().end() - 1);
  typename Graph<T>::Aux aux;
  aux.axis = axis;
  return record(Tensor<T>(std::move(shape), std::move(out)), op, {a}, std::move(aux));
}
}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a, Axis axis = Axis::All) {
  return detail::reduce(Op::Sum, a, axis);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, Axis axis = Axis::All) {
  return detail::reduce(Op::Mean, a, axis);
}

/// out[..., i] = a[..., index[i]] along the last axis.
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::size_t> index) {
  const std::size_t w = a.shape().back();
  if (index.empty()) throw ShapeError("gather: empty index list");
  for (auto i : index)
    if (i >= w)
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for shape " +
                       to_string(a.shape()));
  const std::size_t outer = a.numel() / w;
  std::vector<T> out(outer * index.size());
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < index.size(); ++i) out[o * index.size() + i] = ad[o * w + index[i]];
  Shape shape = a.shape();
  shape.back() = index.size();
  typename Graph<T>::Aux aux;
  aux.index = std::move(index);
  return record(Tensor<T>(std::move(shape), std::move(out)), Op::Gather, {a}, std::move(aux));
}

/// Averages consecutive pairs along the last axis.
template <class T>
Tensor<T> avgpool2(const Tensor<T>& a) {
  const std::size_t w = a.shape().back();
  if (w % 2 != 0)
    throw ShapeError("avgpool2: last extent must be even, got shape " + to_string(a.shape()));
  const std::size_t outer = a.numel() / w, h = w / 2;
  std::vector<T> out(outer * h);
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < h; ++i)
      out[o * h + i] = T(0.5) * (ad[o * w + 2 * i] + ad[o * w + 2 * i + 1]);
  Shape shape = a.shape();
  shape.back() = h;
  return record(Tensor<T>(std::move(shape), std::move(out)), Op::AvgPool2, {a});
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary(Op::Abs, a, [](T x) { return std::abs(x); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(Op::Square, a, [](T x) { return x * x; });
}

/// min(a, c) elementwise; the gradient is zero wherever a >= c.
template <class T>
Tensor<T> min_const(const Tensor<T>& a, T c) {
  typename Graph<T>::Aux aux;
  aux.scalar = c;
  return detail::unary(Op::MinConst, a, [c](T x) { return x < c ? x : c; }, std::move(aux));
}

/// Square root of a non-negative input. The derivative at 0 is taken as 0.
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T v : a.data())
    if (v < T(0)) throw std::domain_error("sqrt: negative input");
  return detail::unary(Op::Sqrt, a, [](T x) { return std::sqrt(x); });
}

/// Elementwise minimum of two same-shape tensors, built from add/sub/abs.
template <class T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return scale(sub(add(a, b), abs(sub(a, b))), T(0.5));
}

/// Runs `fn` on `inputs` without retaining its intermediates. When any input
/// is recorded, one Segment node stands in for the whole computation and
/// `fn` is re-executed under a private graph during the reverse pass. `fn`
/// must be deterministic and must only reach recorded tensors via `inputs`.
template <class T>
Tensor<T> checkpoint(const SegmentFn<T>& fn, const std::vector<Tensor<T>>& inputs) {
  std::vector<Tensor<T>> plain;
  plain.reserve(inputs.size());
  for (const auto& in : inputs) plain.push_back(in.detach());
  Tensor<T> out = fn(plain);
  if (out.recorded()) throw GraphError("checkpoint: segment captured a recorded tensor");
  typename Graph<T>::Aux aux;
  aux.segment = fn;
  return record(out, Op::Segment, inputs, std::move(aux));
}

template <class T>
void Graph<T>::propagate(const Node& n, const std::vector<T>& g,
                         std::vector<std::optional<std::vector<T>>>& grads) {
  auto wants = [&](std::size_t i) { return n.input_ids[i] != kNoNode; };
  auto give = [&](std::size_t i, std::vector<T>&& v) { accumulate(grads[n.input_ids[i]], std::move(v)); };
  const auto& in = n.inputs;
  switch (n.op) {
    case Op::Leaf: break;
    case Op::Add:
    case Op::Sub: {
      if (wants(0)) give(0, unbroadcast(g, in[0].numel()));
      if (wants(1)) {
        auto r = unbroadcast(g, in[1].numel());
        if (n.op == Op::Sub)
          for (auto& v : r) v = -v;
        give(1, std::move(r));
      }
      break;
    }
    case Op::Mul: {
      for (std::size_t s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        const auto other = in[1 - s].data();
        std::vector<T> full(g.size());
        const std::size_t no = other.size();
        for (std::size_t o = 0; o < g.size(); o += no)
          for (std::size_t j = 0; j < no; ++j) full[o + j] = g[o + j] * other[j];
        give(s, unbroadcast(full, in[s].numel()));
      }
      break;
    }
    case Op::Scale: {
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) r[i] = n.aux.scalar * g[i];
      give(0, std::move(r));
      break;
    }
    case Op::MatMul: {
      const std::size_t rows = in[0].shape()[0], k = in[0].shape()[1], m = in[1].shape()[1];
      if (wants(0)) {
        std::vector<T> r(rows * k);
        kernels::matmul_nt(g.data(), in[1].data().data(), r.data(), rows, m, k);
        give(0, std::move(r));
      }
      if (wants(1)) {
        std::vector<T> r(k * m);
        kernels::matmul_tn(in[0].data().data(), g.data(), r.data(), rows, k, m);
        give(1, std::move(r));
      }
      break;
    }
    case Op::Silu: {
      const auto x = in[0].data();
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = detail::sigmoid(x[i]);
        r[i] = g[i] * (s * (T(1) + x[i] * (T(1) - s)));
      }
      give(0, std::move(r));
      break;
    }
    case Op::Concat: {
      const std::size_t last = n.value.shape().back();
      const std::size_t outer = n.value.numel() / last;
      std::size_t off = 0;
      for (std::size_t s = 0; s < in.size(); ++s) {
        const std::size_t w = n.aux.extents[s];
        if (wants(s)) {
          std::vector<T> r(outer * w);
          for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(g.data() + o * last + off, w, r.data() + o * w);
          give(s, std::move(r));
        }
        off += w;
      }
      break;
    }
    case Op::Reshape: give(0, std::vector<T>(g)); break;
    case Op::Sum:
    case Op::Mean: {
      const std::size_t inner = in[0].numel() / n.value.numel();
      const T f = n.op == Op::Mean ? T(1) / static_cast<T>(inner) : T(1);
      std::vector<T> r(in[0].numel());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = g[i / inner] * f;
      give(0, std::move(r));
      break;
    }
    case Op::Gather: {
      const std::size_t w = in[0].shape().back(), cnt = n.aux.index.size();
      const std::size_t outer = in[0].numel() / w;
      std::vector<T> r(in[0].numel(), T(0));
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < cnt; ++i) r[o * w + n.aux.index[i]] += g[o * cnt + i];
      give(0, std::move(r));
      break;
    }
    case Op::AvgPool2: {
      std::vector<T> r(in[0].numel());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = T(0.5) * g[i / 2];
      give(0, std::move(r));
      break;
    }
    case Op::Abs: {
      const auto x = in[0].data();
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i)
        r[i] = x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
      give(0, std::move(r));
      break;
    }
    case Op::Square: {
      const auto x = in[0].data();
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) r[i] = T(2) * x[i] * g[i];
      give(0, std::move(r));
      break;
    }
    case Op::MinConst: {
      const auto x = in[0].data();
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) r[i] = x[i] < n.aux.scalar ? g[i] : T(0);
      give(0, std::move(r));
      break;
    }
    case Op::Sqrt: {
      const auto y = n.value.data();
      std::vector<T> r(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) r[i] = y[i] > T(0) ? g[i] / (T(2) * y[i]) : T(0);
      give(0, std::move(r));
      break;
    }
    case Op::Segment: {
      Graph<T> sub;
      std::vector<Tensor<T>> leaves;
      for (std::size_t s = 0; s < in.size(); ++s)
        leaves.push_back(wants(s) ? sub.leaf(in[s], true) : in[s]);
      Tensor<T> out = n.aux.segment(leaves);
      peak_ = std::max(peak_, nodes_.size() + sub.peak_retained());
      if (!out.recorded()) break;
      auto sg = sub.backward_seeded(out, Tensor<T>(out.shape(), g));
      for (std::size_t s = 0; s < in.size(); ++s)
        if (wants(s)) give(s, sg.at(leaves[s]).to_vector());
      break;
    }
  }
}

/// Max over coordinates of |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor) where
/// g_fd is the central difference (f(x+h e_i) - f(x-h e_i)) / 2h.
template <class T>
struct GradCheckResult {
  T max_rel_error = T(0);
  std::size_t worst_index = 0;
};

template <class T>
GradCheckResult<T> grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                              const Tensor<T>& point, T step, T floor = T(1e-8)) {
  if (!(step > T(0))) throw std::invalid_argument("grad_check: step must be positive");
  Graph<T> g;
  Tensor<T> x = g.leaf(point);
  Tensor<T> y = f(x);
  if (y.numel() != 1)
    throw ShapeError("grad_check: function returned shape " + to_string(y.shape()));
  if (!y.recorded()) throw GraphError("grad_check: function output does not depend on its input");
  const auto analytic = g.backward(y).at(x).to_vector();
  GradCheckResult<T> res;
  Tensor<T> probe = point.detach();
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const T orig = point[i];
    probe.mutable_data()[i] = orig + step;
    const T fp = f(probe).item();
    probe.mutable_data()[i] = orig - step;
    const T fm = f(probe).item();
    probe.mutable_data()[i] = orig;
    const T fd = (fp - fm) / (T(2) * step);
    const T denom = std::max({std::abs(analytic[i]), std::abs(fd), floor});
    const T rel = std::abs(analytic[i] - fd) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace dno::tg

namespace dno {
using Tensor = tg::Tensor<double>;
}  // namespace dno
