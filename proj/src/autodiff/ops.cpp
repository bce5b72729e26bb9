#include "dgvae/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace dgvae::ad {

namespace {

Var wrap(Tape& tape, NodeId id) { return Var(&tape, id); }

Tape& common_tape(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("operation on an unbound Var");
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
  return a.tape();
}

Var unary(OpKind kind, Var a, OpAttrs attrs = {}) {
  return wrap(a.tape(), a.tape().apply(kind, {a.id()}, std::move(attrs)));
}

Var binary(OpKind kind, Var a, Var b) {
  Tape& tape = common_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape target = broadcast_shape(a.shape(), b.shape());
    if (a.shape() != target) a = broadcast_to(a, target);
    if (b.shape() != target) b = broadcast_to(b, target);
  }
  return wrap(tape, tape.apply(kind, {a.id(), b.id()}));
}

}  // namespace

Var parameter(Tape& tape, Shape shape, std::vector<double> values) {
  return wrap(tape, tape.leaf(std::move(shape), std::move(values), true));
}

Var constant(Tape& tape, Shape shape, std::vector<double> values) {
  return wrap(tape, tape.constant(std::move(shape), std::move(values)));
}

Var constant(Tape& tape, double value) { return wrap(tape, tape.scalar(value)); }

Var operator+(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
Var operator-(Var a, Var b) { return binary(OpKind::kSub, a, b); }
Var operator*(Var a, Var b) { return binary(OpKind::kMul, a, b); }
Var operator-(Var a) { return unary(OpKind::kNeg, a); }
Var operator+(Var a, double b) { return scale(a, 1.0, b); }
Var operator+(double a, Var b) { return scale(b, 1.0, a); }
Var operator-(Var a, double b) { return scale(a, 1.0, -b); }
Var operator-(double a, Var b) { return scale(b, -1.0, a); }
Var operator*(Var a, double b) { return scale(a, b, 0.0); }
Var operator*(double a, Var b) { return scale(b, a, 0.0); }

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  return wrap(tape, tape.apply(OpKind::kMatMul, {a.id(), b.id()}));
}

Var transpose(Var a) { return unary(OpKind::kTranspose, a); }
Var exp(Var a) { return unary(OpKind::kExp, a); }
Var log(Var a) { return unary(OpKind::kLog, a); }
Var tanh(Var a) { return unary(OpKind::kTanh, a); }
Var sigmoid(Var a) { return unary(OpKind::kSigmoid, a); }
Var square(Var a) { return unary(OpKind::kSquare, a); }
Var sqrt(Var a) { return unary(OpKind::kSqrt, a); }

Var scale(Var a, double factor, double offset) {
  OpAttrs attrs;
  attrs.factor = factor;
  attrs.offset = offset;
  return unary(OpKind::kScale, a, std::move(attrs));
}

Var maximum(Var a, Var b) { return binary(OpKind::kMaximum, a, b); }

Var sum(Var a) { return unary(OpKind::kSum, a); }

Var sum(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return unary(OpKind::kSum, a, std::move(attrs));
}

Var mean(Var a) { return unary(OpKind::kMean, a); }

Var mean(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return unary(OpKind::kMean, a, std::move(attrs));
}

Var logsumexp(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return unary(OpKind::kLogSumExp, a, std::move(attrs));
}

Var logmeanexp(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return unary(OpKind::kLogMeanExp, a, std::move(attrs));
}

Var softmax(Var a, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return unary(OpKind::kSoftmax, a, std::move(attrs));
}

Var broadcast_to(Var a, Shape shape) {
  if (a.shape() == shape) return a;
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary(OpKind::kBroadcast, a, std::move(attrs));
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return unary(OpKind::kSlice, a, std::move(attrs));
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  std::vector<NodeId> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    common_tape(parts.front(), p);
    ids.push_back(p.id());
  }
  OpAttrs attrs;
  attrs.axis = axis;
  Tape& tape = parts.front().tape();
  return wrap(tape, tape.apply(OpKind::kConcat, ids, std::move(attrs)));
}

Var reshape(Var a, Shape shape) {
  if (a.shape() == shape) return a;
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary(OpKind::kReshape, a, std::move(attrs));
}

double gradcheck(const ScalarFunction& f, std::span<const LeafPoint> point, double eps) {
  auto evaluate = [&](const std::vector<LeafPoint>& at, bool with_grad, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(at.size());
    for (const auto& p : at) leaves.push_back(with_grad ? parameter(tape, p.shape, p.values) : constant(tape, p.shape, p.values));
    Var out = f(tape, leaves);
    const double value = out.item();
    if (!std::isfinite(value)) throw std::runtime_error("gradcheck: non-finite function value");
    if (grads) {
      tape.backward(out.id());
      grads->clear();
      for (const Var& l : leaves) {
        auto g = l.grad();
        grads->emplace_back(g.begin(), g.end());
        if (grads->back().empty()) grads->back().assign(l.values().size(), 0.0);
      }
    }
    return value;
  };

  std::vector<LeafPoint> work(point.begin(), point.end());
  std::vector<std::vector<double>> analytic;
  evaluate(work, true, &analytic);

  double worst = 0.0;
  for (std::size_t l = 0; l < work.size(); ++l) {
    for (std::size_t i = 0; i < work[l].values.size(); ++i) {
      const double x0 = work[l].values[i];
      work[l].values[i] = x0 + eps;
      const double fp = evaluate(work, false, nullptr);
      work[l].values[i] = x0 - eps;
      const double fm = evaluate(work, false, nullptr);
      work[l].values[i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[l][i];
      if (!std::isfinite(a)) throw std::runtime_error("gradcheck: non-finite analytic gradient");
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace dgvae::ad
