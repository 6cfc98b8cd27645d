// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "permflow/diff/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <string>

namespace permflow {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const char* message) {
  if (!ok) throw ShapeError(message);
}

// Builds the message only on failure.
template <std::invocable F>
void require(bool ok, F&& message) {
  if (!ok) throw ShapeError(message());
}

Tape* same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw TapeError("operands are not recorded on the same tape");
  }
  return a.tape();
}

Tape* tape_of(Var a) {
  if (!a.valid()) throw TapeError("invalid Var");
  return a.tape();
}

// Coefficients of P_k with sigmoid^(k)(x) = P_k(sigmoid(x)), ascending powers.
// P_0(s) = s, P_{k+1}(s) = P_k'(s) * s * (1 - s).
constexpr int kMaxSiluOrder = 10;

const std::vector<std::vector<double>>& sigmoid_polys() {
  static const std::vector<std::vector<double>> polys = [] {
    std::vector<std::vector<double>> p(kMaxSiluOrder + 2);
    p[0] = {0.0, 1.0};
    for (std::size_t k = 0; k + 1 < p.size(); ++k) {
      const auto& prev = p[k];
      std::vector<double> deriv(prev.size() > 1 ? prev.size() - 1 : 1, 0.0);
      for (std::size_t i = 1; i < prev.size(); ++i) deriv[i - 1] = prev[i] * static_cast<double>(i);
      // multiply by s - s^2
      std::vector<double> next(deriv.size() + 2, 0.0);
      for (std::size_t i = 0; i < deriv.size(); ++i) {
        next[i + 1] += deriv[i];
        next[i + 2] -= deriv[i];
      }
      p[k + 1] = std::move(next);
    }
    return p;
  }();
  return polys;
}

double horner(const std::vector<double>& coeffs, double s) {
  double acc = 0.0;
  for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * s + *it;
  return acc;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

std::array<std::size_t, 3> chw(const Tensor& t) {
  require(t.rank() == 3, [&] { return "expected [C,H,W] tensor, got " + shape_string(t.shape()); });
  return {t.dim(0), t.dim(1), t.dim(2)};
}

Tensor conv2d_value(const Tensor& x, const Tensor& k, std::size_t stride) {
  const auto [c_in, h, w] = chw(x);
  const std::size_t ks = k.dim(0);
  const std::size_t c_out = k.dim(3);
  const std::size_t ho = (h - ks) / stride + 1;
  const std::size_t wo = (w - ks) / stride + 1;
  Tensor out({c_out, ho, wo}, 0.0);
  auto xd = x.data();
  auto kd = k.data();
  auto od = out.data();
  for (std::size_t p = 0; p < ho; ++p) {
    for (std::size_t q = 0; q < wo; ++q) {
      for (std::size_t u = 0; u < ks; ++u) {
        for (std::size_t v = 0; v < ks; ++v) {
          for (std::size_t c = 0; c < c_in; ++c) {
            const double xv = xd[(c * h + p * stride + u) * w + q * stride + v];
            const double* krow = &kd[((u * ks + v) * c_in + c) * c_out];
            for (std::size_t o = 0; o < c_out; ++o) od[(o * ho + p) * wo + q] += xv * krow[o];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

double silu_derivative(double x, int order) {
  if (order < 0 || order > kMaxSiluOrder) {
    throw TapeError("silu derivative of order " + std::to_string(order) + " is not supported");
  }
  const double s = sigmoid(x);
  const double ds = s * (1.0 - s);
  switch (order) {
    case 0: return x * s;
    case 1: return s + x * ds;
    case 2: return ds * (2.0 + x * (1.0 - 2.0 * s));
    case 3: return ds * (3.0 * (1.0 - 2.0 * s) + x * (1.0 - 6.0 * ds));
    default: break;
  }
  const auto& p = sigmoid_polys();
  return x * horner(p[static_cast<std::size_t>(order)], s) +
         static_cast<double>(order) * horner(p[static_cast<std::size_t>(order) - 1], s);
}

const Tensor& Var::value() const {
  if (!valid()) throw TapeError("value() on invalid Var");
  return tape_->node(id_).value;
}

Tensor Gradients::wrt(Var var) const {
  const auto id = static_cast<std::size_t>(var.id());
  if (id < adjoints_.size() && !adjoints_[id].storage().empty()) return adjoints_[id];
  return Tensor(var.shape(), 0.0);
}

void Tape::check_recording() const {
  if (finalized_) throw TapeError("cannot record on a finalized tape");
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(value);
  n.requires_grad = false;
  return record(std::move(n));
}

Var Tape::record(Node node) {
  check_recording();
  if (node.op != Op::kLeaf && node.op != Op::kConst) {
    node.requires_grad = false;
    for (int in : node.inputs) {
      if (in < 0 || static_cast<std::size_t>(in) >= nodes_.size()) {
        throw TapeError("node input does not precede its consumer");
      }
      node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
    }
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

// --- primitive ops -----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape* tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows(),
          [&] { return "matmul: " + shape_string(A.shape()) + " x " + shape_string(B.shape()); });
  Tensor out({A.rows(), B.cols()});
  as_matrix(out).noalias() = as_matrix(A) * as_matrix(B);
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a.id(), b.id()};
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var add_row_bias(Var a, Var b) {
  Tape* tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == 2 && B.size() == A.cols(),
          [&] { return "add_row_bias: " + shape_string(A.shape()) + " + " + shape_string(B.shape()); });
  Tensor out = A;
  const std::size_t cols = A.cols();
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += B[c];
  Node n;
  n.op = Op::kAddRowBias;
  n.inputs = {a.id(), b.id()};
  n.value = std::move(out);
  return tape->record(std::move(n));
}

namespace {

Var elementwise(Op op, Var a, Var b, const char* name) {
  Tape* tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.shape() == B.shape(),
          [&] { return std::string(name) + ": " + shape_string(A.shape()) + " vs " + shape_string(B.shape()); });
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (op) {
      case Op::kAdd: out[i] += B[i]; break;
      case Op::kSub: out[i] -= B[i]; break;
      default: out[i] *= B[i]; break;
    }
  }
  Node n;
  n.op = op;
  n.inputs = {a.id(), b.id()};
  n.value = std::move(out);
  return tape->record(std::move(n));
}

}  // namespace

Var add(Var a, Var b) { return elementwise(Op::kAdd, a, b, "add"); }
Var sub(Var a, Var b) { return elementwise(Op::kSub, a, b, "sub"); }
Var mul(Var a, Var b) { return elementwise(Op::kMul, a, b, "mul"); }

Var scale(Var a, double c) {
  Tape* tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= c;
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id()};
  n.scale = c;
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var silu_deriv(Var a, int order) {
  Tape* tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.storage()) v = silu_derivative(v, order);
  Node n;
  n.op = Op::kSiluDeriv;
  n.inputs = {a.id()};
  n.order = order;
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape* tape = tape_of(parts.front());
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw TapeError("concat_cols: operands on different tapes");
    require(p.value().rank() == 2 && p.value().rows() == rows, "concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  Node n;
  n.op = Op::kConcatCols;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    const std::size_t pc = P.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(&P.data()[r * pc], pc, &out.data()[r * cols + offset]);
    offset += pc;
    n.inputs.push_back(p.id());
  }
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape* tape = tape_of(a);
  const Tensor& A = a.value();
  require(A.rank() == 2 && begin < end && end <= A.cols(), "slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out({A.rows(), w});
  for (std::size_t r = 0; r < A.rows(); ++r)
    std::copy_n(&A.data()[r * A.cols() + begin], w, &out.data()[r * w]);
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a.id()};
  n.begin = begin;
  n.end = end;
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape* tape = tape_of(a);
  const Tensor& A = a.value();
  require(A.rank() == 2 && begin < end && end <= A.rows(), "slice_rows: bad range");
  const std::size_t c = A.cols();
  std::vector<double> data(A.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           A.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {a.id()};
  n.begin = begin;
  n.end = end;
  n.value = Tensor({end - begin, c}, std::move(data));
  return tape->record(std::move(n));
}

Var gather_rows(Var a, IndexList index) {
  Tape* tape = tape_of(a);
  const Tensor& A = a.value();
  require(A.rank() == 2, "gather_rows: expected matrix");
  const std::size_t c = A.cols();
  Tensor out({index->size(), c});
  for (std::size_t r = 0; r < index->size(); ++r) {
    const std::size_t src = (*index)[r];
    require(src < A.rows(), "gather_rows: index out of range");
    std::copy_n(&A.data()[src * c], c, &out.data()[r * c]);
  }
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {a.id()};
  n.index = std::move(index);
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var segment_sum(Var a, IndexList index, std::size_t segments) {
  Tape* tape = tape_of(a);
  const Tensor& A = a.value();
  require(A.rank() == 2 && index->size() == A.rows(), "segment_sum: index length mismatch");
  const std::size_t c = A.cols();
  Tensor out({segments, c}, 0.0);
  for (std::size_t r = 0; r < A.rows(); ++r) {
    const std::size_t dst = (*index)[r];
    require(dst < segments, "segment_sum: segment out of range");
    for (std::size_t j = 0; j < c; ++j) out[dst * c + j] += A[r * c + j];
  }
  Node n;
  n.op = Op::kSegmentSum;
  n.inputs = {a.id()};
  n.index = std::move(index);
  n.end = segments;
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var sum(Var a) {
  Tape* tape = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Node n;
  n.op = Op::kSum;
  n.inputs = {a.id()};
  n.value = Tensor::scalar(s);
  return tape->record(std::move(n));
}

Var broadcast_rows(Var a, std::size_t rows) {
  Tape* tape = tape_of(a);
  const Tensor& A = a.value();
  const std::size_t c = A.size();
  Tensor out({rows, c});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(A.data().data(), c, &out.data()[r * c]);
  Node n;
  n.op = Op::kBroadcastRows;
  n.inputs = {a.id()};
  n.end = rows;
  n.value = std::move(out);
  return tape->record(std::move(n));
}

Var reshape(Var a, Shape shape) {
  Tape* tape = tape_of(a);
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a.id()};
  n.value = a.value().reshaped(std::move(shape));
  return tape->record(std::move(n));
}

Var conv2d(Var input, Var kernel, std::size_t stride) {
  Tape* tape = same_tape(input, kernel);
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  const auto [c_in, h, w] = chw(X);
  require(K.rank() == 4 && K.dim(0) == K.dim(1) && K.dim(2) == c_in,
          [&] { return "conv2d: kernel " + shape_string(K.shape()) + " vs input " + shape_string(X.shape()); });
  require(stride >= 1 && h >= K.dim(0) && w >= K.dim(0), "conv2d: input smaller than kernel");
  Node n;
  n.op = Op::kConv2d;
  n.inputs = {input.id(), kernel.id()};
  n.begin = stride;
  n.value = conv2d_value(X, K, stride);
  return tape->record(std::move(n));
}

Var add_channel_bias(Var a, Var bias) {
  Tape* tape = same_tape(a, bias);
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  const auto [c, h, w] = chw(A);
  require(B.size() == c, "add_channel_bias: bias size mismatch");
  Tensor out = A;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) out[ch * h * w + i] += B[ch];
  Node n;
  n.op = Op::kAddChannelBias;
  n.inputs = {a.id(), bias.id()};
  n.value = std::move(out);
  return tape->record(std::move(n));
}

// --- forward mode ------------------------------------------------------------

Var Tape::emit_tangent(int id, const std::vector<int>& tangent_of) {
  // Copy what we need: recording below may reallocate nodes_.
  const Node nd = [&] {
    const Node& src = nodes_[static_cast<std::size_t>(id)];
    Node c;
    c.op = src.op;
    c.inputs = src.inputs;
    c.scale = src.scale;
    c.order = src.order;
    c.begin = src.begin;
    c.end = src.end;
    c.index = src.index;
    return c;
  }();
  auto tan = [&](std::size_t k) -> int { return tangent_of[static_cast<std::size_t>(nd.inputs[k])]; };
  auto in = [&](std::size_t k) { return Var(this, nd.inputs[k]); };
  auto tv = [&](std::size_t k) { return Var(this, tan(k)); };

  switch (nd.op) {
    case Op::kLeaf:
    case Op::kConst:
      return Var();
    case Op::kMatMul: {
      Var out;
      if (tan(0) >= 0) out = matmul(tv(0), in(1));
      if (tan(1) >= 0) {
        Var t2 = matmul(in(0), tv(1));
        out = out.valid() ? add(out, t2) : t2;
      }
      return out;
    }
    case Op::kAddRowBias: {
      if (tan(0) >= 0 && tan(1) >= 0) return add_row_bias(tv(0), tv(1));
      if (tan(0) >= 0) return tv(0);
      return broadcast_rows(tv(1), in(0).value().rows());
    }
    case Op::kAdd:
    case Op::kSub: {
      const double sign = nd.op == Op::kAdd ? 1.0 : -1.0;
      if (tan(0) >= 0 && tan(1) >= 0) return nd.op == Op::kAdd ? add(tv(0), tv(1)) : sub(tv(0), tv(1));
      if (tan(0) >= 0) return tv(0);
      return sign > 0 ? tv(1) : scale(tv(1), -1.0);
    }
    case Op::kMul: {
      Var out;
      if (tan(0) >= 0) out = mul(tv(0), in(1));
      if (tan(1) >= 0) {
        Var t2 = mul(in(0), tv(1));
        out = out.valid() ? add(out, t2) : t2;
      }
      return out;
    }
    case Op::kScale:
      return scale(tv(0), nd.scale);
    case Op::kSiluDeriv:
      return mul(silu_deriv(in(0), nd.order + 1), tv(0));
    case Op::kConcatCols: {
      std::vector<Var> parts;
      for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
        if (tan(k) >= 0) {
          parts.push_back(tv(k));
        } else {
          parts.push_back(constant(zeros_like(in(k).value())));
        }
      }
      return concat_cols(parts);
    }
    case Op::kSliceCols:
      return slice_cols(tv(0), nd.begin, nd.end);
    case Op::kSliceRows:
      return slice_rows(tv(0), nd.begin, nd.end);
    case Op::kGatherRows:
      return gather_rows(tv(0), nd.index);
    case Op::kSegmentSum:
      return segment_sum(tv(0), nd.index, nd.end);
    case Op::kSum:
      return sum(tv(0));
    case Op::kBroadcastRows:
      return broadcast_rows(tv(0), nd.end);
    case Op::kReshape:
      return reshape(tv(0), nodes_[static_cast<std::size_t>(id)].value.shape());
    case Op::kConv2d: {
      Var out;
      if (tan(0) >= 0) out = conv2d(tv(0), in(1), nd.begin);
      if (tan(1) >= 0) {
        Var t2 = conv2d(in(0), tv(1), nd.begin);
        out = out.valid() ? add(out, t2) : t2;
      }
      return out;
    }
    case Op::kAddChannelBias: {
      if (tan(0) >= 0 && tan(1) >= 0) return add_channel_bias(tv(0), tv(1));
      if (tan(0) >= 0) return tv(0);
      // Tangent flows only through the bias: broadcast it over the spatial grid.
      return add_channel_bias(constant(zeros_like(in(0).value())), tv(1));
    }
  }
  throw TapeError("jvp: unknown op");
}

std::vector<Var> Tape::jvp(std::span<const Var> seeds, std::span<const Var> tangents,
                           std::span<const Var> outputs) {
  check_recording();
  if (seeds.size() != tangents.size()) throw ShapeError("jvp: seeds and tangents differ in count");
  const std::size_t n0 = nodes_.size();
  std::vector<int> tangent_of(n0, -1);
  int first = static_cast<int>(n0);
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    if (seeds[k].tape() != this || tangents[k].tape() != this) {
      throw TapeError("jvp: seed not on this tape");
    }
    if (seeds[k].shape() != tangents[k].shape()) {
      throw ShapeError("jvp: tangent shape " + shape_string(tangents[k].shape()) +
                       " does not match seed " + shape_string(seeds[k].shape()));
    }
    tangent_of[static_cast<std::size_t>(seeds[k].id())] = tangents[k].id();
    first = std::min(first, seeds[k].id());
  }

  // Only nodes that are ancestors of an output need a tangent.
  std::vector<char> needed(n0, 0);
  int last = -1;
  for (const Var& o : outputs) {
    if (o.tape() != this) throw TapeError("jvp: output not on this tape");
    needed[static_cast<std::size_t>(o.id())] = 1;
    last = std::max(last, o.id());
  }
  for (int id = last; id >= first; --id) {
    if (!needed[static_cast<std::size_t>(id)]) continue;
    for (int in : nodes_[static_cast<std::size_t>(id)].inputs) needed[static_cast<std::size_t>(in)] = 1;
  }

  for (int id = first; id <= last; ++id) {
    const auto uid = static_cast<std::size_t>(id);
    if (!needed[uid] || tangent_of[uid] >= 0) continue;
    bool any = false;
    for (int in : nodes_[uid].inputs) any = any || tangent_of[static_cast<std::size_t>(in)] >= 0;
    if (!any) continue;
    Var t = emit_tangent(id, tangent_of);
    tangent_of[uid] = t.valid() ? t.id() : -1;
  }

  std::vector<Var> result;
  result.reserve(outputs.size());
  for (const Var& o : outputs) {
    const int t = tangent_of[static_cast<std::size_t>(o.id())];
    if (t >= 0) {
      result.emplace_back(this, t);
    } else {
      Tensor z(nodes_[static_cast<std::size_t>(o.id())].value.shape(), 0.0);
      result.push_back(constant(std::move(z)));
    }
  }
  return result;
}

// --- reverse mode ------------------------------------------------------------

Gradients Tape::vjp(std::span<const Cotangent> seeds) const {
  if (!finalized_) throw TapeError("vjp on a tape that has not been finalized");
  std::vector<Tensor> adj(nodes_.size());
  int last = -1;
  for (const Cotangent& s : seeds) {
    if (s.var.tape() != this) throw TapeError("vjp: seed not on this tape");
    const Tensor& v = s.var.value();
    if (v.shape() != s.value.shape()) {
      throw ShapeError("vjp: cotangent shape " + shape_string(s.value.shape()) +
                       " does not match output " + shape_string(v.shape()));
    }
    auto& a = adj[static_cast<std::size_t>(s.var.id())];
    if (a.storage().empty()) a = zeros_like(v);
    accumulate(a, s.value);
    last = std::max(last, s.var.id());
  }

  auto grad = [&](int id) -> Tensor& {
    auto& g = adj[static_cast<std::size_t>(id)];
    if (g.storage().empty()) g = zeros_like(nodes_[static_cast<std::size_t>(id)].value);
    return g;
  };
  auto wants = [&](int id) { return nodes_[static_cast<std::size_t>(id)].requires_grad; };

  for (int id = last; id >= 0; --id) {
    const Node& nd = nodes_[static_cast<std::size_t>(id)];
    if (!nd.requires_grad || nd.op == Op::kLeaf) continue;
    if (adj[static_cast<std::size_t>(id)].storage().empty()) continue;
    const Tensor& G = adj[static_cast<std::size_t>(id)];
    const auto& ins = nd.inputs;

    switch (nd.op) {
      case Op::kLeaf:
      case Op::kConst:
        break;
      case Op::kMatMul: {
        const Tensor& A = nodes_[static_cast<std::size_t>(ins[0])].value;
        const Tensor& B = nodes_[static_cast<std::size_t>(ins[1])].value;
        if (wants(ins[0])) as_matrix(grad(ins[0])).noalias() += as_matrix(G) * as_matrix(B).transpose();
        if (wants(ins[1])) as_matrix(grad(ins[1])).noalias() += as_matrix(A).transpose() * as_matrix(G);
        break;
      }
      case Op::kAddRowBias: {
        if (wants(ins[0])) accumulate(grad(ins[0]), G);
        if (wants(ins[1])) {
          Tensor& gb = grad(ins[1]);
          const std::size_t c = G.cols();
          for (std::size_t r = 0; r < G.rows(); ++r)
            for (std::size_t j = 0; j < c; ++j) gb[j] += G[r * c + j];
        }
        break;
      }
      case Op::kAdd:
        if (wants(ins[0])) accumulate(grad(ins[0]), G);
        if (wants(ins[1])) accumulate(grad(ins[1]), G);
        break;
      case Op::kSub:
        if (wants(ins[0])) accumulate(grad(ins[0]), G);
        if (wants(ins[1])) {
          Tensor& gb = grad(ins[1]);
          for (std::size_t i = 0; i < G.size(); ++i) gb[i] -= G[i];
        }
        break;
      case Op::kMul: {
        const Tensor& A = nodes_[static_cast<std::size_t>(ins[0])].value;
        const Tensor& B = nodes_[static_cast<std::size_t>(ins[1])].value;
        if (wants(ins[0])) {
          Tensor& ga = grad(ins[0]);
          for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * B[i];
        }
        if (wants(ins[1])) {
          Tensor& gb = grad(ins[1]);
          for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * A[i];
        }
        break;
      }
      case Op::kScale: {
        Tensor& ga = grad(ins[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += nd.scale * G[i];
        break;
      }
      case Op::kSiluDeriv: {
        const Tensor& A = nodes_[static_cast<std::size_t>(ins[0])].value;
        Tensor& ga = grad(ins[0]);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * silu_derivative(A[i], nd.order + 1);
        break;
      }
      case Op::kConcatCols: {
        const std::size_t rows = G.rows();
        const std::size_t cols = G.cols();
        std::size_t offset = 0;
        for (int in : ins) {
          const std::size_t pc = nodes_[static_cast<std::size_t>(in)].value.cols();
          if (wants(in)) {
            Tensor& gp = grad(in);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < pc; ++j) gp[r * pc + j] += G[r * cols + offset + j];
          }
          offset += pc;
        }
        break;
      }
      case Op::kSliceCols: {
        Tensor& ga = grad(ins[0]);
        const std::size_t ac = ga.cols();
        const std::size_t w = nd.end - nd.begin;
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t j = 0; j < w; ++j) ga[r * ac + nd.begin + j] += G[r * w + j];
        break;
      }
      case Op::kSliceRows: {
        Tensor& ga = grad(ins[0]);
        const std::size_t c = ga.cols();
        for (std::size_t i = 0; i < G.size(); ++i) ga[nd.begin * c + i] += G[i];
        break;
      }
      case Op::kGatherRows: {
        Tensor& ga = grad(ins[0]);
        const std::size_t c = ga.cols();
        for (std::size_t r = 0; r < nd.index->size(); ++r) {
          const std::size_t dst = (*nd.index)[r];
          for (std::size_t j = 0; j < c; ++j) ga[dst * c + j] += G[r * c + j];
        }
        break;
      }
      case Op::kSegmentSum: {
        Tensor& ga = grad(ins[0]);
        const std::size_t c = ga.cols();
        for (std::size_t r = 0; r < nd.index->size(); ++r) {
          const std::size_t src = (*nd.index)[r];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += G[src * c + j];
        }
        break;
      }
      case Op::kSum: {
        Tensor& ga = grad(ins[0]);
        const double g = G[0];
        for (auto& v : ga.storage()) v += g;
        break;
      }
      case Op::kBroadcastRows: {
        Tensor& ga = grad(ins[0]);
        const std::size_t c = ga.size();
        for (std::size_t r = 0; r < nd.end; ++r)
          for (std::size_t j = 0; j < c; ++j) ga[j] += G[r * c + j];
        break;
      }
      case Op::kReshape:
        accumulate(grad(ins[0]), G);
        break;
      case Op::kConv2d: {
        const Tensor& X = nodes_[static_cast<std::size_t>(ins[0])].value;
        const Tensor& K = nodes_[static_cast<std::size_t>(ins[1])].value;
        const std::size_t stride = nd.begin;
        const std::size_t c_in = X.dim(0), h = X.dim(1), w = X.dim(2);
        const std::size_t ks = K.dim(0), c_out = K.dim(3);
        const std::size_t ho = G.dim(1), wo = G.dim(2);
        const bool gx_on = wants(ins[0]);
        const bool gk_on = wants(ins[1]);
        Tensor* gx = gx_on ? &grad(ins[0]) : nullptr;
        Tensor* gk = gk_on ? &grad(ins[1]) : nullptr;
        for (std::size_t p = 0; p < ho; ++p) {
          for (std::size_t q = 0; q < wo; ++q) {
            for (std::size_t u = 0; u < ks; ++u) {
              for (std::size_t v = 0; v < ks; ++v) {
                for (std::size_t c = 0; c < c_in; ++c) {
                  const std::size_t xi = (c * h + p * stride + u) * w + q * stride + v;
                  const std::size_t kb = ((u * ks + v) * c_in + c) * c_out;
                  double acc = 0.0;
                  for (std::size_t o = 0; o < c_out; ++o) {
                    const double g = G[(o * ho + p) * wo + q];
                    acc += g * K[kb + o];
                    if (gk) (*gk)[kb + o] += g * X[xi];
                  }
                  if (gx) (*gx)[xi] += acc;
                }
              }
            }
          }
        }
        break;
      }
      case Op::kAddChannelBias: {
        if (wants(ins[0])) accumulate(grad(ins[0]), G);
        if (wants(ins[1])) {
          Tensor& gb = grad(ins[1]);
          const std::size_t c = G.dim(0), hw = G.dim(1) * G.dim(2);
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) gb[ch] += G[ch * hw + i];
        }
        break;
      }
    }
  }
  return Gradients(std::move(adj));
}

}  // namespace permflow
