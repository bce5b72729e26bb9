#include "dgvae/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dgvae::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw std::invalid_argument(std::string(op_name(kind)) + ": " + detail);
}

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
  shape_error(kind, "incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  out.reserve(shape.size() - 1);
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

std::size_t checked_axis(OpKind kind, const Shape& shape, int axis) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= shape.size())
    shape_error(kind, "axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape));
  return static_cast<std::size_t>(axis);
}

// Strides of `in` expressed over the index space of `out` (0 on broadcast dims).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t lead = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t j = in.size(); j-- > 0;) {
    strides[lead + j] = (in[j] == 1) ? 0 : stride;
    stride *= in[j];
  }
  return strides;
}

// Calls visit(out_index, in_index) for every element of `out`.
template <typename Visit>
void for_each_broadcast(const Shape& in, const Shape& out, Visit&& visit) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    visit(std::size_t{0}, std::size_t{0});
    return;
  }
  const auto strides = broadcast_strides(in, out);
  // The innermost dimension is handled as a tight loop.
  const std::size_t last = out[rank - 1];
  const std::size_t last_stride = strides[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t in_base = 0;
  for (std::size_t k = 0; k < total; k += last) {
    for (std::size_t j = 0; j < last; ++j) visit(k + j, in_base + j * last_stride);
    // Advance the outer multi-index.
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      in_base += strides[d];
      if (counter[d] < out[d]) break;
      in_base -= strides[d] * counter[d];
      counter[d] = 0;
    }
  }
}

bool is_elementwise_binary(OpKind kind) {
  return kind == OpKind::kAdd || kind == OpKind::kSub || kind == OpKind::kMul || kind == OpKind::kMaximum;
}

bool is_elementwise_unary(OpKind kind) {
  switch (kind) {
    case OpKind::kExp:
    case OpKind::kLog:
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kSquare:
    case OpKind::kSqrt:
    case OpKind::kNeg:
    case OpKind::kScale:
      return true;
    default:
      return false;
  }
}

double unary_forward(OpKind kind, double x, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::kExp:
      return std::exp(x);
    case OpKind::kLog:
      return std::log(x);
    case OpKind::kTanh:
      return std::tanh(x);
    case OpKind::kSigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case OpKind::kSquare:
      return x * x;
    case OpKind::kSqrt:
      return std::sqrt(x);
    case OpKind::kNeg:
      return -x;
    case OpKind::kScale:
      return attrs.factor * x + attrs.offset;
    default:
      return 0.0;
  }
}

// d(out)/d(in) expressed in terms of input x and output y.
double unary_derivative(OpKind kind, double x, double y, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::kExp:
      return y;
    case OpKind::kLog:
      return 1.0 / x;
    case OpKind::kTanh:
      return 1.0 - y * y;
    case OpKind::kSigmoid:
      return y * (1.0 - y);
    case OpKind::kSquare:
      return 2.0 * x;
    case OpKind::kSqrt:
      return 0.5 / y;
    case OpKind::kNeg:
      return -1.0;
    case OpKind::kScale:
      return attrs.factor;
    default:
      return 0.0;
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMaximum: return "maximum";
    case OpKind::kLogSumExp: return "logsumexp";
    case OpKind::kLogMeanExp: return "logmeanexp";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kBroadcast: return "broadcast";
    case OpKind::kSlice: return "slice";
    case OpKind::kConcat: return "concat";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kNeg: return "neg";
    case OpKind::kScale: return "scale";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
  }
  return "unknown";
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(OpKind::kBroadcast, a, b);
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

std::span<const double> LeafGradients::operator[](NodeId leaf) const { return tape_->grad(leaf); }

std::vector<NodeId> LeafGradients::leaves() const {
  std::vector<NodeId> out;
  for (std::uint32_t i = 0; i < tape_->size(); ++i) {
    const auto& n = tape_->node(NodeId{i});
    if (n.op == OpKind::kLeaf && n.requires_grad) out.push_back(NodeId{i});
  }
  return out;
}

NodeId Tape::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != numel(shape))
    shape_error(OpKind::kLeaf, "value count " + std::to_string(values.size()) + " does not match shape " +
                                   shape_string(shape));
  TensorNode n;
  n.shape = std::move(shape);
  n.values = std::move(values);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

double Tape::item(NodeId id) const {
  const auto& n = node(id);
  if (n.values.size() != 1) throw std::invalid_argument("item: node has shape " + shape_string(n.shape));
  return n.values[0];
}

NodeId Tape::apply(OpKind kind, std::span<const NodeId> inputs, OpAttrs attrs) {
  for (NodeId in : inputs)
    if (in.index >= nodes_.size()) shape_error(kind, "input node " + std::to_string(in.index) + " not on this tape");

  auto arity = [&](std::size_t want) {
    if (inputs.size() != want)
      shape_error(kind, "expected " + std::to_string(want) + " inputs, got " + std::to_string(inputs.size()));
  };

  TensorNode out;
  out.op = kind;
  out.parents.assign(inputs.begin(), inputs.end());
  for (NodeId in : inputs) out.requires_grad = out.requires_grad || nodes_[in.index].requires_grad;

  if (is_elementwise_binary(kind)) {
    arity(2);
    const auto& a = nodes_[inputs[0].index];
    const auto& b = nodes_[inputs[1].index];
    if (a.shape != b.shape) shape_error(kind, a.shape, b.shape);
    out.shape = a.shape;
    out.values.resize(a.values.size());
    const double* pa = a.values.data();
    const double* pb = b.values.data();
    double* po = out.values.data();
    const std::size_t n = a.values.size();
    switch (kind) {
      case OpKind::kAdd:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case OpKind::kSub:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case OpKind::kMul:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
      default:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] >= pb[i] ? pa[i] : pb[i];
        break;
    }
  } else if (is_elementwise_unary(kind)) {
    arity(1);
    const auto& a = nodes_[inputs[0].index];
    out.shape = a.shape;
    out.values.resize(a.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = unary_forward(kind, a.values[i], attrs);
  } else {
    switch (kind) {
      case OpKind::kLeaf:
        shape_error(kind, "leaves are created with Tape::leaf");
      case OpKind::kMatMul: {
        arity(2);
        const auto& a = nodes_[inputs[0].index];
        const auto& b = nodes_[inputs[1].index];
        if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) shape_error(kind, a.shape, b.shape);
        const auto m = a.shape[0], k = a.shape[1], n = b.shape[1];
        out.shape = {m, n};
        out.values.assign(m * n, 0.0);
        MutMap(out.values.data(), m, n).noalias() = ConstMap(a.values.data(), m, k) * ConstMap(b.values.data(), k, n);
        break;
      }
      case OpKind::kTranspose: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        if (a.shape.size() != 2) shape_error(kind, "expects rank 2, got " + shape_string(a.shape));
        const auto m = a.shape[0], n = a.shape[1];
        out.shape = {n, m};
        out.values.resize(m * n);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) out.values[j * m + i] = a.values[i * n + j];
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        if (attrs.axis == -1) {
          out.shape = {};
          double s = 0.0;
          for (double v : a.values) s += v;
          if (kind == OpKind::kMean) {
            if (a.values.empty()) shape_error(kind, "mean of empty tensor");
            s /= static_cast<double>(a.values.size());
          }
          out.values = {s};
        } else {
          const auto axis = checked_axis(kind, a.shape, attrs.axis);
          const auto sp = split_at(a.shape, axis);
          out.shape = drop_axis(a.shape, axis);
          out.values.assign(sp.outer * sp.inner, 0.0);
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const double* src = &a.values[(o * sp.extent + e) * sp.inner];
              double* dst = &out.values[o * sp.inner];
              for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
            }
          if (kind == OpKind::kMean) {
            if (sp.extent == 0) shape_error(kind, "mean over empty axis");
            for (double& v : out.values) v /= static_cast<double>(sp.extent);
          }
        }
        break;
      }
      case OpKind::kLogSumExp:
      case OpKind::kLogMeanExp:
      case OpKind::kSoftmax: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        const auto axis = checked_axis(kind, a.shape, attrs.axis);
        const auto sp = split_at(a.shape, axis);
        if (sp.extent == 0) shape_error(kind, "reduction over empty axis");
        const bool reduce = kind != OpKind::kSoftmax;
        out.shape = reduce ? drop_axis(a.shape, axis) : a.shape;
        out.values.resize(reduce ? sp.outer * sp.inner : a.values.size());
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            auto at = [&](std::size_t e) { return (o * sp.extent + e) * sp.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, a.values[at(e)]);
            double lse;
            if (std::isinf(mx)) {
              lse = mx;
            } else {
              double s = 0.0;
              for (std::size_t e = 0; e < sp.extent; ++e) s += std::exp(a.values[at(e)] - mx);
              if (kind == OpKind::kLogMeanExp) s /= static_cast<double>(sp.extent);
              lse = mx + std::log(s);
            }
            if (reduce) {
              out.values[o * sp.inner + i] = lse;
            } else {
              for (std::size_t e = 0; e < sp.extent; ++e) out.values[at(e)] = std::exp(a.values[at(e)] - lse);
            }
          }
        break;
      }
      case OpKind::kBroadcast: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        if (attrs.shape.size() < a.shape.size()) shape_error(kind, a.shape, attrs.shape);
        const std::size_t lead = attrs.shape.size() - a.shape.size();
        for (std::size_t j = 0; j < a.shape.size(); ++j)
          if (a.shape[j] != 1 && a.shape[j] != attrs.shape[lead + j]) shape_error(kind, a.shape, attrs.shape);
        out.shape = attrs.shape;
        out.values.resize(numel(out.shape));
        const double* src = a.values.data();
        double* dst = out.values.data();
        for_each_broadcast(a.shape, out.shape, [&](std::size_t k, std::size_t j) { dst[k] = src[j]; });
        break;
      }
      case OpKind::kSlice: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        const auto axis = checked_axis(kind, a.shape, attrs.axis);
        if (attrs.begin > attrs.end || attrs.end > a.shape[axis])
          shape_error(kind, "range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) +
                                ") invalid for shape " + shape_string(a.shape));
        const auto sp = split_at(a.shape, axis);
        const std::size_t width = attrs.end - attrs.begin;
        out.shape = a.shape;
        out.shape[axis] = width;
        out.values.resize(sp.outer * width * sp.inner);
        for (std::size_t o = 0; o < sp.outer; ++o)
          std::copy_n(&a.values[(o * sp.extent + attrs.begin) * sp.inner], width * sp.inner,
                      &out.values[o * width * sp.inner]);
        break;
      }
      case OpKind::kConcat: {
        if (inputs.empty()) shape_error(kind, "no inputs");
        const Shape& first = nodes_[inputs[0].index].shape;
        const auto axis = checked_axis(kind, first, attrs.axis);
        std::size_t total = 0;
        for (NodeId in : inputs) {
          const Shape& s = nodes_[in.index].shape;
          if (s.size() != first.size()) shape_error(kind, first, s);
          for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != first[d]) shape_error(kind, first, s);
          total += s[axis];
        }
        out.shape = first;
        out.shape[axis] = total;
        const auto osp = split_at(out.shape, axis);
        out.values.resize(numel(out.shape));
        std::size_t offset = 0;
        for (NodeId in : inputs) {
          const auto& a = nodes_[in.index];
          const std::size_t w = a.shape[axis];
          for (std::size_t o = 0; o < osp.outer; ++o)
            std::copy_n(&a.values[o * w * osp.inner], w * osp.inner,
                        &out.values[(o * osp.extent + offset) * osp.inner]);
          offset += w;
        }
        break;
      }
      case OpKind::kReshape: {
        arity(1);
        const auto& a = nodes_[inputs[0].index];
        if (numel(attrs.shape) != a.values.size()) shape_error(kind, a.shape, attrs.shape);
        out.shape = attrs.shape;
        out.values = a.values;
        break;
      }
      default:
        shape_error(kind, "unsupported op");
    }
  }

  out.attrs = std::move(attrs);
  nodes_.push_back(std::move(out));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<double>& Tape::grad_buffer(NodeId id) {
  auto& n = nodes_[id.index];
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

LeafGradients Tape::backward(NodeId loss) {
  const auto& root = node(loss);
  if (root.values.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(root.shape));
  for (auto& n : nodes_) n.grad.clear();
  if (root.requires_grad) {
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && !nodes_[i].grad.empty() && nodes_[i].op != OpKind::kLeaf) backprop_node(i);
    }
  }
  return LeafGradients(*this);
}

void Tape::backprop_node(std::size_t index) {
  // Parent grad buffers may reallocate nothing in nodes_, so references stay valid.
  const TensorNode& n = nodes_[index];
  const std::vector<double>& g = n.grad;
  const OpKind kind = n.op;

  auto wants = [&](std::size_t p) { return nodes_[n.parents[p].index].requires_grad; };
  auto parent = [&](std::size_t p) -> const TensorNode& { return nodes_[n.parents[p].index]; };

  if (is_elementwise_binary(kind)) {
    const auto& a = parent(0).values;
    const auto& b = parent(1).values;
    const std::size_t len = g.size();
    if (wants(0)) {
      auto& ga = grad_buffer(n.parents[0]);
      switch (kind) {
        case OpKind::kAdd:
        case OpKind::kSub:
          for (std::size_t i = 0; i < len; ++i) ga[i] += g[i];
          break;
        case OpKind::kMul:
          for (std::size_t i = 0; i < len; ++i) ga[i] += g[i] * b[i];
          break;
        default:
          for (std::size_t i = 0; i < len; ++i)
            if (a[i] >= b[i]) ga[i] += g[i];
          break;
      }
    }
    if (wants(1)) {
      auto& gb = grad_buffer(n.parents[1]);
      switch (kind) {
        case OpKind::kAdd:
          for (std::size_t i = 0; i < len; ++i) gb[i] += g[i];
          break;
        case OpKind::kSub:
          for (std::size_t i = 0; i < len; ++i) gb[i] -= g[i];
          break;
        case OpKind::kMul:
          for (std::size_t i = 0; i < len; ++i) gb[i] += g[i] * a[i];
          break;
        default:
          for (std::size_t i = 0; i < len; ++i)
            if (!(a[i] >= b[i])) gb[i] += g[i];
          break;
      }
    }
    return;
  }

  if (is_elementwise_unary(kind)) {
    if (!wants(0)) return;
    const auto& x = parent(0).values;
    auto& gx = grad_buffer(n.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * unary_derivative(kind, x[i], n.values[i], n.attrs);
    return;
  }

  switch (kind) {
    case OpKind::kMatMul: {
      const auto& a = parent(0);
      const auto& b = parent(1);
      const auto m = a.shape[0], k = a.shape[1], cols = b.shape[1];
      ConstMap gm(g.data(), m, cols);
      if (wants(0)) {
        auto& ga = grad_buffer(n.parents[0]);
        MutMap(ga.data(), m, k).noalias() += gm * ConstMap(b.values.data(), k, cols).transpose();
      }
      if (wants(1)) {
        auto& gb = grad_buffer(n.parents[1]);
        MutMap(gb.data(), k, cols).noalias() += ConstMap(a.values.data(), m, k).transpose() * gm;
      }
      break;
    }
    case OpKind::kTranspose: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      const auto m = a.shape[0], cols = a.shape[1];
      auto& ga = grad_buffer(n.parents[0]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j * m + i];
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      auto& ga = grad_buffer(n.parents[0]);
      if (n.attrs.axis == -1) {
        const double v = kind == OpKind::kMean ? g[0] / static_cast<double>(a.values.size()) : g[0];
        for (double& x : ga) x += v;
      } else {
        const auto sp = split_at(a.shape, static_cast<std::size_t>(n.attrs.axis));
        const double f = kind == OpKind::kMean ? 1.0 / static_cast<double>(sp.extent) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t e = 0; e < sp.extent; ++e) {
            double* dst = &ga[(o * sp.extent + e) * sp.inner];
            const double* src = &g[o * sp.inner];
            for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += f * src[i];
          }
      }
      break;
    }
    case OpKind::kLogSumExp:
    case OpKind::kLogMeanExp: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      auto& ga = grad_buffer(n.parents[0]);
      const auto sp = split_at(a.shape, static_cast<std::size_t>(n.attrs.axis));
      const double w = n.op == OpKind::kLogMeanExp ? 1.0 / static_cast<double>(sp.extent) : 1.0;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double lse = n.values[o * sp.inner + i];
          const double go = g[o * sp.inner + i];
          if (std::isinf(lse)) continue;
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t at = (o * sp.extent + e) * sp.inner + i;
            ga[at] += go * w * std::exp(a.values[at] - lse);
          }
        }
      break;
    }
    case OpKind::kSoftmax: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      auto& ga = grad_buffer(n.parents[0]);
      const auto sp = split_at(a.shape, static_cast<std::size_t>(n.attrs.axis));
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double dot = 0.0;
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t at = (o * sp.extent + e) * sp.inner + i;
            dot += g[at] * n.values[at];
          }
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t at = (o * sp.extent + e) * sp.inner + i;
            ga[at] += n.values[at] * (g[at] - dot);
          }
        }
      break;
    }
    case OpKind::kBroadcast: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      auto& ga = grad_buffer(n.parents[0]);
      double* dst = ga.data();
      const double* src = g.data();
      for_each_broadcast(a.shape, n.shape, [&](std::size_t k, std::size_t j) { dst[j] += src[k]; });
      break;
    }
    case OpKind::kSlice: {
      if (!wants(0)) break;
      const auto& a = parent(0);
      auto& ga = grad_buffer(n.parents[0]);
      const auto sp = split_at(a.shape, static_cast<std::size_t>(n.attrs.axis));
      const std::size_t width = n.attrs.end - n.attrs.begin;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        double* dst = &ga[(o * sp.extent + n.attrs.begin) * sp.inner];
        const double* src = &g[o * width * sp.inner];
        for (std::size_t i = 0; i < width * sp.inner; ++i) dst[i] += src[i];
      }
      break;
    }
    case OpKind::kConcat: {
      const auto axis = static_cast<std::size_t>(n.attrs.axis);
      const auto osp = split_at(n.shape, axis);
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.parents.size(); ++p) {
        const std::size_t w = parent(p).shape[axis];
        if (wants(p)) {
          auto& gp = grad_buffer(n.parents[p]);
          for (std::size_t o = 0; o < osp.outer; ++o) {
            double* dst = &gp[o * w * osp.inner];
            const double* src = &g[(o * osp.extent + offset) * osp.inner];
            for (std::size_t i = 0; i < w * osp.inner; ++i) dst[i] += src[i];
          }
        }
        offset += w;
      }
      break;
    }
    case OpKind::kReshape: {
      if (!wants(0)) break;
      auto& ga = grad_buffer(n.parents[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    default:
      break;
  }
}

}  // namespace dgvae::ad
