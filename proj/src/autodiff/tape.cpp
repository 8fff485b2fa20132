#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "trajgen/autodiff.hpp"
#include "trajgen/error.hpp"

namespace trajgen::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

ConstMapMatrix as_matrix(const Tensor& t) {
  return ConstMapMatrix(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

MapMatrix as_matrix(Tensor& t) {
  return MapMatrix(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_error(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

Shape broadcast_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.size() == 1 && b.size() == 1) return a.rank() >= b.rank() ? a.shape() : b.shape();
  if (a.size() == 1) return b.shape();
  if (b.size() == 1) return a.shape();
  shape_error(op, a.shape(), b.shape());
}

template <class F>
Tensor binary_map(Op op, const Tensor& a, const Tensor& b, F f) {
  Tensor out(broadcast_shape(op, a, b));
  const std::size_t n = out.size();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values().data();
  const std::size_t sa = a.size() == 1 ? 0 : 1;
  const std::size_t sb = b.size() == 1 ? 0 : 1;
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i * sa], pb[i * sb]);
  return out;
}

template <class F>
Tensor unary_map(const Tensor& a, F f) {
  Tensor out = a;
  for (double& v : out.values()) v = f(v);
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Reduces an output-shaped gradient onto an operand that may have been broadcast.
Tensor reduce_to(const Tensor& g, const Tensor& operand) {
  if (g.shape() == operand.shape()) return g;
  double total = 0.0;
  for (double v : g.values()) total += v;
  Tensor out(operand.shape(), total);
  return out;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::concat: return "concat";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::log: return "log";
    case Op::negate: return "negate";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::square: return "square";
    case Op::exp: return "exp";
    case Op::relu: return "relu";
    case Op::transpose: return "transpose";
    case Op::add_rowwise: return "add_rowwise";
    case Op::slice_cols: return "slice_cols";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("Var is not attached to a tape");
  return tape->value(*this);
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Op op, Tensor value, std::initializer_list<Var> inputs, std::size_t aux0,
                 std::size_t aux1) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), aux0,
                aux1);
}

Var Tape::record(Op op, Tensor value, std::span<const Var> inputs, std::size_t aux0,
                 std::size_t aux1) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.aux0 = aux0;
  n.aux1 = aux1;
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw ContractError(std::string(op_name(op)) + ": input from another tape");
    n.inputs.push_back(v.index);
    n.requires_grad = n.requires_grad || nodes_[v.index].requires_grad;
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t index, const Tensor& g) {
  Node& n = nodes_[index];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate_scaled(std::size_t index, const Tensor& g, double scale) {
  Node& n = nodes_[index];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  auto dst = n.grad.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
  if (nodes_[loss.index].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(nodes_[loss.index].value.shape()));
  }
  for (Node& n : nodes_) n.has_grad = false;
  Node& root = nodes_[loss.index];
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (nodes_[i].has_grad && nodes_[i].op != Op::leaf) propagate(i);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.index];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

void Tape::propagate(std::size_t index) {
  // nodes_ is never resized during the sweep, so these references stay valid.
  const Node& n = nodes_[index];
  const Tensor& g = n.grad;
  const Tensor& y = n.value;
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

  switch (n.op) {
    case Op::leaf:
      break;
    case Op::add:
      if (needs(0)) accumulate(n.inputs[0], reduce_to(g, in(0)));
      if (needs(1)) accumulate(n.inputs[1], reduce_to(g, in(1)));
      break;
    case Op::sub:
      if (needs(0)) accumulate(n.inputs[0], reduce_to(g, in(0)));
      if (needs(1)) accumulate_scaled(n.inputs[1], reduce_to(g, in(1)), -1.0);
      break;
    case Op::mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (needs(0)) {
        accumulate(n.inputs[0], reduce_to(binary_map(Op::mul, g, b, std::multiplies<>()), a));
      }
      if (needs(1)) {
        accumulate(n.inputs[1], reduce_to(binary_map(Op::mul, g, a, std::multiplies<>()), b));
      }
      break;
    }
    case Op::div: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (needs(0)) {
        accumulate(n.inputs[0], reduce_to(binary_map(Op::div, g, b, std::divides<>()), a));
      }
      if (needs(1)) {
        // d(a/b)/db = -(a/b)/b
        Tensor q = binary_map(Op::div, n.value, b, std::divides<>());
        accumulate_scaled(n.inputs[1], reduce_to(binary_map(Op::mul, g, q, std::multiplies<>()), b), -1.0);
      }
      break;
    }
    case Op::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (needs(0)) {
        Tensor ga(a.shape());
        as_matrix(ga).noalias() = as_matrix(g) * as_matrix(b).transpose();
        accumulate(n.inputs[0], ga);
      }
      if (needs(1)) {
        Tensor gb(b.shape());
        as_matrix(gb).noalias() = as_matrix(a).transpose() * as_matrix(g);
        accumulate(n.inputs[1], gb);
      }
      break;
    }
    case Op::concat: {
      const std::size_t rows = y.rows();
      const std::size_t total = y.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& part = in(k);
        const std::size_t c = part.cols();
        if (needs(k)) {
          Tensor gp(part.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(g.values().data() + r * total + offset, c, gp.values().data() + r * c);
          }
          accumulate(n.inputs[k], gp);
        }
        offset += c;
      }
      break;
    }
    case Op::sigmoid: {
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= y[i] * (1.0 - y[i]);
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::tanh: {
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - y[i] * y[i];
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::log: {
      const Tensor& x = in(0);
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] /= x[i];
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::negate:
      accumulate_scaled(n.inputs[0], g, -1.0);
      break;
    case Op::sum:
      accumulate(n.inputs[0], Tensor(in(0).shape(), g.item()));
      break;
    case Op::mean:
      accumulate(n.inputs[0], Tensor(in(0).shape(), g.item() / static_cast<double>(in(0).size())));
      break;
    case Op::square: {
      const Tensor& x = in(0);
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 2.0 * x[i];
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::exp: {
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= y[i];
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::relu: {
      const Tensor& x = in(0);
      Tensor gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (!(x[i] > 0.0)) gx[i] = 0.0;
      }
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::transpose: {
      Tensor gx(in(0).shape());
      as_matrix(gx) = as_matrix(g).transpose();
      accumulate(n.inputs[0], gx);
      break;
    }
    case Op::add_rowwise: {
      if (needs(0)) accumulate(n.inputs[0], g);
      if (needs(1)) {
        const Tensor& v = in(1);
        Tensor gv(v.shape(), 0.0);
        const std::size_t rows = g.rows();
        const std::size_t cols = g.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
        }
        accumulate(n.inputs[1], gv);
      }
      break;
    }
    case Op::slice_cols: {
      const Tensor& x = in(0);
      Tensor gx(x.shape(), 0.0);
      const std::size_t rows = x.rows();
      const std::size_t cols = x.cols();
      const std::size_t width = n.aux1 - n.aux0;
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(g.values().data() + r * width, width, gx.values().data() + r * cols + n.aux0);
      }
      accumulate(n.inputs[0], gx);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Op constructors

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(Op::add, binary_map(Op::add, a.value(), b.value(), std::plus<>()), {a, b});
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(Op::sub, binary_map(Op::sub, a.value(), b.value(), std::minus<>()), {a, b});
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(Op::mul, binary_map(Op::mul, a.value(), b.value(), std::multiplies<>()), {a, b});
}

Var div(Var a, Var b) {
  Tape& t = tape_of(a, b);
  for (std::size_t i = 0; i < b.value().size(); ++i) {
    if (b.value()[i] == 0.0) {
      throw DomainError("div: zero divisor at element " + std::to_string(i) + " of " +
                        shape_str(b.shape()));
    }
  }
  return t.record(Op::div, binary_map(Op::div, a.value(), b.value(), std::divides<>()), {a, b});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    shape_error(Op::matmul, a.shape(), b.shape());
  }
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(Op::matmul, matmul(a.value(), b.value()), {a, b});
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat: no operands");
  Tape* t = parts.front().tape;
  const Tensor& first = parts.front().value();
  const std::size_t rank = first.rank();
  if (rank == 0 || rank > 2) throw ShapeError("concat: operands must be rank 1 or 2, got " + shape_str(first.shape()));
  const std::size_t rows = first.rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.tape != t) throw ContractError("concat: operands live on different tapes");
    const Tensor& v = p.value();
    if (v.rank() != rank || v.rows() != rows) shape_error(Op::concat, first.shape(), v.shape());
    total += v.cols();
  }
  Tensor out = rank == 1 ? Tensor(Shape{total}) : Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t c = v.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.values().data() + r * c, c, out.values().data() + r * total + offset);
    }
    offset += c;
  }
  return t->record(Op::concat, std::move(out), parts);
}

Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var sigmoid(Var a) {
  return a.tape->record(Op::sigmoid, unary_map(a.value(), stable_sigmoid), {a});
}

Var tanh(Var a) {
  return a.tape->record(Op::tanh, unary_map(a.value(), [](double x) { return std::tanh(x); }), {a});
}

Var log(Var a) {
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(x[i]) + " at element " +
                        std::to_string(i) + " of " + shape_str(x.shape()));
    }
  }
  return a.tape->record(Op::log, unary_map(x, [](double v) { return std::log(v); }), {a});
}

Var negate(Var a) {
  return a.tape->record(Op::negate, unary_map(a.value(), [](double x) { return -x; }), {a});
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Op::sum, Tensor::scalar(s), {a});
}

Var mean(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Op::mean, Tensor::scalar(s / static_cast<double>(a.value().size())), {a});
}

Var square(Var a) {
  return a.tape->record(Op::square, unary_map(a.value(), [](double x) { return x * x; }), {a});
}

Var exp(Var a) {
  return a.tape->record(Op::exp, unary_map(a.value(), [](double x) { return std::exp(x); }), {a});
}

Var relu(Var a) {
  return a.tape->record(Op::relu, unary_map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
                        {a});
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  Tensor out = Tensor::matrix(x.cols(), x.rows());
  as_matrix(out) = as_matrix(x).transpose();
  return a.tape->record(Op::transpose, std::move(out), {a});
}

Var add_rowwise(Var m, Var v) {
  Tape& t = tape_of(m, v);
  const Tensor& x = m.value();
  const Tensor& b = v.value();
  const bool row_vector = b.rank() == 1 || (b.rank() == 2 && b.rows() == 1);
  if (x.rank() != 2 || !row_vector || b.cols() != x.cols()) shape_error(Op::add_rowwise, x.shape(), b.shape());
  Tensor out = x;
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  }
  return t.record(Op::add_rowwise, std::move(out), {m, v});
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || begin >= end || end > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  const std::size_t width = end - begin;
  Tensor out = Tensor::matrix(rows, width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.values().data() + r * cols + begin, width, out.values().data() + r * width);
  }
  return a.tape->record(Op::slice_cols, std::move(out), {a}, begin, end);
}

Var add(Var a, double b) { return add(a, a.tape->constant(Tensor::scalar(b))); }
Var mul(Var a, double b) { return mul(a, a.tape->constant(Tensor::scalar(b))); }
Var sub(double a, Var b) { return sub(b.tape->constant(Tensor::scalar(a)), b); }

}  // namespace trajgen::ad
