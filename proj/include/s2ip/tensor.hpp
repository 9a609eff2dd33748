#pragma once

// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//
// Operations record a node on the thread's active Tape whenever at least one
// input requires a gradient. Without an active tape every result is a plain
// constant, which is how inference and finite-difference evaluation run.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace s2ip {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const Tape* tape = nullptr;
  std::size_t tape_index = 0;

  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += g;
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // Leaf that participates in differentiation.
  static Tensor parameter(Shape shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only leaves may be written; intermediate values are owned by the tape.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void clear_grad();

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Append-only record of differentiable operations. Backward walks it in
// reverse append order, which is a valid reverse topological order because a
// node can only be recorded after its inputs exist.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  // Makes a tape the thread's active tape for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    // nullptr suspends recording.
    explicit Scope(Tape* tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  std::size_t size() const { return nodes_.size(); }
  void record(const std::shared_ptr<detail::Node>& node);
  void backward(const Tensor& loss);
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Populates grad on every requires_grad leaf reachable from a scalar loss.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Element-wise. Binary operands must have equal shapes, or one of them is a
// scalar (one element), or a row whose length equals the other's last dim.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Division by an exact zero yields an infinity; it is not trapped.
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(const Tensor& a, double s);
Tensor operator*(double s, const Tensor& a);

// ---------------------------------------------------------------------------
// Linear algebra.

// (m x k) . (k x n). A left operand of rank > 2 has its leading dims flattened
// into rows; two rank-3 operands with equal batch size are multiplied per batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);

// ---------------------------------------------------------------------------
// Shape manipulation.

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Rows of the leading axis, in the given order.
Tensor index_select(const Tensor& a, const std::vector<std::size_t>& indices);
Tensor stack(const std::vector<Tensor>& parts);

// ---------------------------------------------------------------------------
// Reductions and normalization.

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
// Shift-by-max stabilized.
Tensor softmax(const Tensor& a, int axis);
// Normalizes over the last axis, then applies per-feature gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
// Sets entries above the diagonal of the last two axes to -inf.
Tensor causal_mask(const Tensor& scores);

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle.

// Compares backward() gradients of `loss_fn` with central differences over
// every coordinate of `params`. Returns the max of |a - n| / max(1e-12, |a| + |n|).
// `loss_fn` must be deterministic and build its graph on the active tape.
double grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                  double eps = 1e-5);

// ---------------------------------------------------------------------------
// Binary serialization: u64 rank, u64 dims, then little-endian f64 data.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// u64 record count, then per record: u64 name length, name bytes, tensor.
void write_named_tensors(std::ostream& out, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> read_named_tensors(std::istream& in);
void save_named_tensors(const std::string& path, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> load_named_tensors(const std::string& path);

void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in);

}  // namespace s2ip
