#include "s2ip/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "s2ip/errors.hpp"

namespace s2ip {

using detail::Node;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Builds the result of an operation and, when differentiation is live,
// records it on the active tape.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  node->is_leaf = false;
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    bool needs = false;
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (needs) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->parents.push_back(t->node());
      node->backward = std::move(backward_fn);
      tape->record(node);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                     std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  node->is_leaf = false;
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(backward_fn);
      tape->record(node);
    }
  }
  return Tensor(std::move(node));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// ---------------------------------------------------------------------------
// Broadcasting

enum class Bcast { same, scalar, row };

struct BinaryPlan {
  Shape out;
  Bcast a = Bcast::same;
  Bcast b = Bcast::same;
  std::size_t row_len = 1;
};

bool is_row_of(const Shape& small, const Shape& big) {
  if (big.size() < 2 || small.empty()) return false;
  for (std::size_t i = 0; i + 1 < small.size(); ++i) {
    if (small[i] != 1) return false;
  }
  return small.back() == big.back() && small.size() <= big.size();
}

BinaryPlan plan_binary(const Shape& a, const Shape& b, const char* op) {
  BinaryPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t na = shape_numel(a);
  const std::size_t nb = shape_numel(b);
  if (nb == 1 && na >= 1 && a.size() >= b.size()) {
    plan.out = a;
    plan.b = Bcast::scalar;
  } else if (na == 1 && b.size() >= a.size()) {
    plan.out = b;
    plan.a = Bcast::scalar;
  } else if (is_row_of(b, a)) {
    plan.out = a;
    plan.b = Bcast::row;
    plan.row_len = a.back();
  } else if (is_row_of(a, b)) {
    plan.out = b;
    plan.a = Bcast::row;
    plan.row_len = b.back();
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
  }
  return plan;
}

inline std::size_t bindex(Bcast mode, std::size_t i, std::size_t row_len) {
  switch (mode) {
    case Bcast::same:
      return i;
    case Bcast::scalar:
      return 0;
    case Bcast::row:
      return i % row_len;
  }
  return i;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  require_defined(a, name);
  require_defined(b, name);
  const BinaryPlan plan = plan_binary(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(plan.out);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[bindex(plan.a, i, plan.row_len)], bv[bindex(plan.b, i, plan.row_len)]);
  }
  return make_result(plan.out, std::move(out), {&a, &b}, [plan, n, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bindex(plan.a, i, plan.row_len);
        const std::size_t ib = bindex(plan.b, i, plan.row_len);
        ga[ia] += g[i] * da(pa.data[ia], pb.data[ib], self.data[i]);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bindex(plan.a, i, plan.row_len);
        const std::size_t ib = bindex(plan.b, i, plan.row_len);
        gb[ib] += g[i] * db(pa.data[ia], pb.data[ib], self.data[i]);
      }
    }
  });
}

// `deriv(x, y)` receives input and output value.
template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  require_defined(a, name);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) gp[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

// Output element i copies input element src[i].
Tensor gather_op(const Tensor& a, Shape shape, std::vector<std::size_t> src) {
  auto av = a.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = av[src[i]];
  return make_result(std::move(shape), std::move(out), {&a}, [src = std::move(src)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) gp[src[i]] += self.grad[i];
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C(m x n) += A(m x k) B(k x n)
void mm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += aip * b[j];
    }
  }
}

// dA(m x k) += dC(m x n) B(k x n)^T
void mm_nt(const double* dC, const double* B, double* dA, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* g = dC + i * n;
    double* out = dA + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g[j] * b[j];
      out[p] += acc;
    }
  }
}

// dB(k x n) += A(m x k)^T dC(m x n)
void mm_tn(const double* A, const double* dC, double* dB, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    const double* g = dC + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      double* out = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += aip * g[j];
    }
  }
}

void write_raw(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw LoadError("unexpected end of tensor data");
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return Tensor(new_node({}, {value})); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " cannot hold " + std::to_string(values.size()) +
                     " values");
  }
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  if (!node_->is_leaf) throw ValidationError("only leaf tensors can be modified in place");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  require_defined(*this, "set_requires_grad");
  if (!node_->is_leaf) throw ValidationError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  return node_->grad_buffer();
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(new_node(shape(), node_->data)); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad && node_->is_leaf;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tape::~Tape() { clear(); }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::Scope(Tape* tape) : previous_(g_active_tape) { g_active_tape = tape; }

Tape::Scope::~Scope() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const std::shared_ptr<Node>& node) {
  node->tape = this;
  node->tape_index = nodes_.size();
  nodes_.push_back(node);
}

void Tape::clear() {
  // Release newest first so no destructor chain walks the whole graph.
  while (!nodes_.empty()) {
    nodes_.back()->backward = nullptr;
    nodes_.back()->parents.clear();
    nodes_.pop_back();
  }
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw ValidationError("backward: undefined loss");
  if (loss.numel() != 1) throw ValidationError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  const auto& root = loss.node();
  if (!root->requires_grad) return;
  if (root->is_leaf) {
    root->accumulate(0, 1.0);
    return;
  }
  if (root->tape != this) throw ValidationError("backward: loss was not recorded on this tape");
  root->accumulate(0, 1.0);
  for (std::size_t i = root->tape_index + 1; i-- > 0;) {
    Node& node = *nodes_[i];
    if (!node.grad.empty() && node.backward) node.backward(node);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ValidationError("backward: undefined loss");
  const Tape* tape = loss.node()->tape;
  if (tape == nullptr) {
    if (loss.numel() != 1) throw ValidationError("backward: loss must be a scalar");
    if (loss.requires_grad() && loss.is_leaf()) loss.node()->accumulate(0, 1.0);
    return;
  }
  const_cast<Tape*>(tape)->backward(loss);
}

// ---------------------------------------------------------------------------
// Element-wise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary_op(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(k * (x + c * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary_op(a, "add_scalar", [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() == 3 && sb.size() == 3) {
    const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k) {
      throw ShapeError("matmul: cannot multiply " + shape_string(sa) + " by " + shape_string(sb));
    }
    std::vector<double> out(batch * m * n, 0.0);
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t t = 0; t < batch; ++t) {
      mm_nn(av.data() + t * m * k, bv.data() + t * k * n, out.data() + t * m * n, m, k, n);
    }
    return make_result({batch, m, n}, std::move(out), {&a, &b}, [batch, m, k, n](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      for (std::size_t t = 0; t < batch; ++t) {
        const double* g = self.grad.data() + t * m * n;
        if (pa.requires_grad) mm_nt(g, pb.data.data() + t * k * n, pa.grad_buffer().data() + t * m * k, m, k, n);
        if (pb.requires_grad) mm_tn(pa.data.data() + t * m * k, g, pb.grad_buffer().data() + t * k * n, m, k, n);
      }
    });
  }
  if (sa.size() < 2 || sb.size() != 2 || sa.back() != sb[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_string(sa) + " by " + shape_string(sb));
  }
  const std::size_t k = sa.back();
  const std::size_t n = sb[1];
  const std::size_t m = shape_numel(sa) / k;
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(m * n, 0.0);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result(std::move(out_shape), std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) mm_nt(self.grad.data(), pb.data.data(), pa.grad_buffer().data(), m, k, n);
    if (pb.requires_grad) mm_tn(pa.data.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const std::size_t r = a.rank();
  if (r < 2) throw ShapeError("transpose: rank must be at least 2");
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[r - 1], order[r - 2]);
  return permute(a, order);
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  return make_result(std::move(shape), a.to_vector(), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  require_defined(a, "permute");
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw ShapeError("permute: order length does not match rank");
  std::vector<bool> seen(r, false);
  for (std::size_t o : order) {
    if (o >= r || seen[o]) throw ShapeError("permute: invalid axis order");
    seen[o] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[order[i]];
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_strides[order[i]];
    src[flat] = s;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out[i]) break;
      idx[i] = 0;
    }
  }
  return gather_op(a, std::move(out), std::move(src));
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  require_defined(a, "slice");
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  if (start + length > s.len) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis length " + std::to_string(s.len));
  }
  Shape out = a.shape();
  out[ax] = length;
  std::vector<std::size_t> src;
  src.reserve(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < length; ++l) {
      const std::size_t base = (o * s.len + start + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) src.push_back(base + i);
    }
  }
  return gather_op(a, std::move(out), std::move(src));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != out.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < sp.size(); ++i) {
      if (i != ax && sp[i] != out[i]) {
        throw ShapeError("concat: shape " + shape_string(sp) + " does not match " + shape_string(parts[0].shape()));
      }
    }
    out[ax] += sp[ax];
  }
  const AxisSplit so = split_axis(out, ax);
  std::vector<double> data(shape_numel(out));
  // (part, offset within output axis, length) per part
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[ax];
    auto pv = p.data();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(pv.data() + o * len * so.inner, len * so.inner, data.data() + (o * so.len + off) * so.inner);
    }
    off += len;
  }
  return make_result_n(std::move(out), std::move(data), parts, [so, offsets, ax](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t len = p.shape[ax];
      auto& gp = p.grad_buffer();
      for (std::size_t o = 0; o < so.outer; ++o) {
        const double* g = self.grad.data() + (o * so.len + offsets[k]) * so.inner;
        double* dst = gp.data() + o * len * so.inner;
        for (std::size_t i = 0; i < len * so.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices) {
  require_defined(a, "index_select");
  if (a.rank() == 0) throw ShapeError("index_select: scalar input");
  const std::size_t rows = a.shape()[0];
  const std::size_t width = rows == 0 ? 0 : a.numel() / rows;
  Shape out = a.shape();
  out[0] = indices.size();
  std::vector<std::size_t> src;
  src.reserve(indices.size() * width);
  for (std::size_t r : indices) {
    if (r >= rows) throw ShapeError("index_select: index " + std::to_string(r) + " out of range");
    for (std::size_t c = 0; c < width; ++c) src.push_back(r * width + c);
  }
  return gather_op(a, std::move(out), std::move(src));
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, 0);
}

// ---------------------------------------------------------------------------
// Reductions and normalization

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  auto av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  return make_result({}, {s}, {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (double& g : gp) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis) {
  require_defined(a, "sum_axis");
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> data(s.outer * s.inner, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) data[o * s.inner + i] += av[(o * s.len + l) * s.inner + i];
  return make_result(std::move(out), std::move(data), {&a}, [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gp[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

Tensor mean_axis(const Tensor& a, int axis) {
  const std::size_t len = a.dim(axis);
  if (len == 0) throw ShapeError("mean_axis: empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(len));
}

Tensor softmax(const Tensor& a, int axis) {
  require_defined(a, "softmax");
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(av[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  }
  return make_result(a.shape(), std::move(out), {&a}, [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          dot += self.grad[j] * self.data[j];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          gp[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias length must equal last dim " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                     [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto& g = self.grad;
                       if (pg.requires_grad || pb.requires_grad) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             if (pg.requires_grad) pg.accumulate(j, g[r * d + j] * xhat[r * d + j]);
                             if (pb.requires_grad) pb.accumulate(j, g[r * d + j]);
                           }
                         }
                       }
                       if (!px.requires_grad) return;
                       auto& gx = px.grad_buffer();
                       const double inv_d = 1.0 / static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0;
                         double m2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = g[r * d + j] * pg.data[j];
                           m1 += dh;
                           m2 += dh * xhat[r * d + j];
                         }
                         m1 *= inv_d;
                         m2 *= inv_d;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = g[r * d + j] * pg.data[j];
                           gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                         }
                       }
                     });
}

Tensor causal_mask(const Tensor& scores) {
  require_defined(scores, "causal_mask");
  if (scores.rank() < 2) throw ShapeError("causal_mask: rank must be at least 2");
  const std::size_t rows = scores.dim(-2);
  const std::size_t cols = scores.dim(-1);
  const std::size_t mats = scores.numel() / (rows * cols);
  std::vector<double> out = scores.to_vector();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = i + 1; j < cols; ++j) out[(m * rows + i) * cols + j] = ninf;
  return make_result(scores.shape(), std::move(out), {&scores}, [rows, cols, mats](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gp = p.grad_buffer();
    for (std::size_t m = 0; m < mats; ++m)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j <= i && j < cols; ++j) {
          const std::size_t k = (m * rows + i) * cols + j;
          gp[k] += self.grad[k];
        }
  });
}

// ---------------------------------------------------------------------------
// Gradient check

double grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params, double eps) {
  if (eps <= 0.0) throw ValidationError("grad_check: eps must be positive");
  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.clear_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& p : ps) {
    std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                : std::vector<double>(p.numel(), 0.0);
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double fp = loss_fn().item();
      values[i] = orig - eps;
      const double fm = loss_fn().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1e-12, std::abs(analytic[i]) + std::abs(numeric));
      worst = std::max(worst, err);
    }
    p.clear_grad();
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Serialization

void write_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  write_raw(out, &v, sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  read_raw(in, &v, sizeof v);
  return to_little(v);
}

void write_tensor(std::ostream& out, const Tensor& t) {
  const Shape& s = t.shape();
  write_u64(out, s.size());
  for (std::size_t d : s) write_u64(out, d);
  for (double v : t.data()) {
    const double le = to_little(v);
    write_raw(out, &le, sizeof le);
  }
}

Tensor read_tensor(std::istream& in) {
  constexpr std::uint64_t kMaxRank = 8;
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;
  const std::uint64_t rank = read_u64(in);
  if (rank > kMaxRank) throw LoadError("tensor rank " + std::to_string(rank) + " is not plausible");
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = read_u64(in);
    n *= d;
    if (n > kMaxElements) throw LoadError("tensor too large");
  }
  std::vector<double> data(n);
  for (auto& v : data) {
    double le = 0.0;
    read_raw(in, &le, sizeof le);
    v = to_little(le);
  }
  return Tensor::from(std::move(shape), std::move(data));
}

void write_named_tensors(std::ostream& out, const std::vector<NamedTensor>& records) {
  write_u64(out, records.size());
  for (const auto& r : records) {
    write_u64(out, r.name.size());
    write_raw(out, r.name.data(), r.name.size());
    write_tensor(out, r.tensor);
  }
}

std::vector<NamedTensor> read_named_tensors(std::istream& in) {
  const std::uint64_t count = read_u64(in);
  if (count > (1u << 20)) throw LoadError("implausible record count " + std::to_string(count));
  std::vector<NamedTensor> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t len = read_u64(in);
    if (len > 4096) throw LoadError("implausible tensor name length");
    std::string name(len, '\0');
    read_raw(in, name.data(), len);
    Tensor t = read_tensor(in);
    records.push_back({std::move(name), std::move(t)});
  }
  return records;
}

void save_named_tensors(const std::string& path, const std::vector<NamedTensor>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_named_tensors(out, records);
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<NamedTensor> load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path);
  return read_named_tensors(in);
}

}  // namespace s2ip
