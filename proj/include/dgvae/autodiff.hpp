#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape owns an append-only list of nodes. Every operation appends one node
// holding its forward values and an op-record (kind, parents, attributes).
// Parents always precede children, so the reverse append order is a valid
// topological order for the backward sweep.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dgvae::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kSum,
  kMean,
  kMaximum,
  kLogSumExp,
  kLogMeanExp,
  kSoftmax,
  kBroadcast,
  kSlice,
  kConcat,
  kSquare,
  kSqrt,
  kNeg,
  kScale,
  kReshape,
  kTranspose,
};

const char* op_name(OpKind kind);

// Attributes consulted per kind:
//   kSum/kMean/kLogSumExp/kLogMeanExp/kSoftmax: axis (-1 reduces everything, sum/mean only)
//   kSlice: axis, begin, end        kConcat: axis
//   kScale: factor * x + offset     kBroadcast/kReshape: shape
struct OpAttrs {
  int axis = -1;
  std::size_t begin = 0;
  std::size_t end = 0;
  double factor = 1.0;
  double offset = 0.0;
  Shape shape;
};

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward reaches the node
  OpKind op = OpKind::kLeaf;
  std::vector<NodeId> parents;
  OpAttrs attrs;
  bool requires_grad = false;
};

class Tape;

// Read-only view of leaf gradients produced by Tape::backward.
class LeafGradients {
 public:
  explicit LeafGradients(const Tape& tape) : tape_(&tape) {}
  // Zero-length span when the leaf received no gradient.
  std::span<const double> operator[](NodeId leaf) const;
  std::vector<NodeId> leaves() const;

 private:
  const Tape* tape_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  NodeId leaf(Shape shape, std::vector<double> values, bool requires_grad);
  NodeId constant(Shape shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
  }
  NodeId scalar(double value) { return leaf({}, {value}, false); }

  // Appends the result of applying `kind` to `inputs`. Throws
  // std::invalid_argument naming the op and the offending shapes.
  NodeId apply(OpKind kind, std::span<const NodeId> inputs, OpAttrs attrs = {});
  NodeId apply(OpKind kind, std::initializer_list<NodeId> inputs, OpAttrs attrs = {}) {
    return apply(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  // Reverse sweep from a scalar node. Gradients of a previous sweep are
  // cleared first, so calling twice yields identical results.
  LeafGradients backward(NodeId loss);

  const TensorNode& node(NodeId id) const { return nodes_.at(id.index); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::span<const double> values(NodeId id) const { return node(id).values; }
  std::span<const double> grad(NodeId id) const { return node(id).grad; }
  double item(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  void backprop_node(std::size_t index);
  std::vector<double>& grad_buffer(NodeId id);

  std::vector<TensorNode> nodes_;
};

// Value handle so that graph-building code reads like arithmetic.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const { return tape_->shape(id_); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::span<const double> values() const { return tape_->values(id_); }
  std::span<const double> grad() const { return tape_->grad(id_); }
  double item() const { return tape_->item(id_); }

 private:
  Tape* tape_ = nullptr;
  NodeId id_{};
};

Var parameter(Tape& tape, Shape shape, std::vector<double> values);
Var constant(Tape& tape, Shape shape, std::vector<double> values);
Var constant(Tape& tape, double value);

// Elementwise binary ops broadcast both sides to a common shape first
// (numpy rules, right-aligned).
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var sqrt(Var a);
Var scale(Var a, double factor, double offset = 0.0);
Var maximum(Var a, Var b);
Var sum(Var a);
Var sum(Var a, int axis);
Var mean(Var a);
Var mean(Var a, int axis);
Var logsumexp(Var a, int axis);
// log((1/n) sum exp(a)) along axis; exactly a's common value when all entries agree.
Var logmeanexp(Var a, int axis);
Var softmax(Var a, int axis);
Var broadcast_to(Var a, Shape shape);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
Var concat(std::span<const Var> parts, int axis);
Var reshape(Var a, Shape shape);

Shape broadcast_shape(const Shape& a, const Shape& b);

// Max over leaves of |analytic - central difference| / max(1, |central difference|).
// `f` must rebuild the same graph from the given leaves on every call.
struct LeafPoint {
  Shape shape;
  std::vector<double> values;
};
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;
double gradcheck(const ScalarFunction& f, std::span<const LeafPoint> point, double eps = 1e-5);

}  // namespace dgvae::ad
