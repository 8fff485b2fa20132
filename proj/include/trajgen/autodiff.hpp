#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tape records every primitive applied to its Vars in creation order, so
// node inputs always precede the node. Tape::backward walks that order in
// reverse and accumulates adjoints. Tapes are single-threaded; use one per
// thread.
//
// Broadcasting is limited to a tensor with exactly one element combined with
// an arbitrary tensor. Row-vector bias addition is the separate add_rowwise op.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace trajgen::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class Tensor {
 public:
  // A scalar zero.
  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor vector(std::vector<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  // Matrix view: rank 0 -> 1x1, rank 1 -> 1xN.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  // Value of a one-element tensor.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  concat,
  sigmoid,
  tanh,
  log,
  negate,
  sum,
  mean,
  square,
  exp,
  relu,
  transpose,
  add_rowwise,
  slice_cols,
};

const char* op_name(Op op);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient is tracked.
  Var variable(Tensor value);
  // Leaf excluded from differentiation.
  Var constant(Tensor value);

  // Records a non-leaf node. Used by the op free functions.
  Var record(Op op, Tensor value, std::initializer_list<Var> inputs, std::size_t aux0 = 0,
             std::size_t aux1 = 0);
  Var record(Op op, Tensor value, std::span<const Var> inputs, std::size_t aux0 = 0,
             std::size_t aux1 = 0);

  const Tensor& value(Var v) const { return nodes_[v.index].value; }
  bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }
  Op op(Var v) const { return nodes_[v.index].op; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a one-element loss. Previous gradients are discarded.
  void backward(Var loss);
  // Gradient of the last backward loss w.r.t. v; zeros when v is not on a path
  // to the loss.
  Tensor grad(Var v) const;

 private:
  struct Node {
    Op op = Op::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::size_t aux0 = 0;
    std::size_t aux1 = 0;
  };

  void accumulate(std::size_t index, const Tensor& g);
  void accumulate_scaled(std::size_t index, const Tensor& g, double scale);
  void propagate(std::size_t index);

  std::vector<Node> nodes_;
};

// Elementwise binary ops accept equal shapes or a one-element operand.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Elementwise quotient; throws DomainError if any divisor element is zero.
Var div(Var a, Var b);
Var matmul(Var a, Var b);
// Concatenation along the last axis (columns); all operands share the row count.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
Var sigmoid(Var a);
Var tanh(Var a);
// Throws DomainError on any non-positive input.
Var log(Var a);
Var negate(Var a);
Var sum(Var a);
Var mean(Var a);
Var square(Var a);
Var exp(Var a);
Var relu(Var a);
Var transpose(Var a);
// m (R x C) plus row vector v (C or 1 x C) added to every row.
Var add_rowwise(Var m, Var v);
// Columns [begin, end) of a rank-2 tensor.
Var slice_cols(Var a, std::size_t begin, std::size_t end);

// Scalar convenience: the double becomes a constant leaf.
Var add(Var a, double b);
Var mul(Var a, double b);
Var sub(double a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return negate(a); }
inline Var operator*(Var a, double b) { return mul(a, b); }
inline Var operator*(double b, Var a) { return mul(a, b); }
inline Var operator+(Var a, double b) { return add(a, b); }
inline Var operator-(double a, Var b) { return sub(a, b); }

// Value-level matrix product, used outside of tapes.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace trajgen::ad
