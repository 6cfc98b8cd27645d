// Copyright 2026 The permflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "permflow/core/error.hpp"
#include "permflow/diff/tensor.hpp"

namespace permflow {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class Op : std::uint8_t {
  kLeaf,
  kConst,
  kMatMul,
  kAddRowBias,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSiluDeriv,
  kConcatCols,
  kSliceCols,
  kSliceRows,
  kGatherRows,
  kSegmentSum,
  kSum,
  kBroadcastRows,
  kReshape,
  kConv2d,
  kAddChannelBias,
};

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

struct Node {
  Op op = Op::kConst;
  std::vector<int> inputs;
  Tensor value;
  bool requires_grad = false;
  // Op attributes. Only the fields relevant to `op` are meaningful.
  double scale = 0.0;
  int order = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  IndexList index;
};

struct Cotangent {
  Var var;
  Tensor value;
};

/// Reverse accumulation result: one adjoint per node reached from the seeds.
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> adjoints) : adjoints_(std::move(adjoints)) {}

  /// dL/d(var); zeros when `var` does not influence the seeded outputs.
  Tensor wrt(Var var) const;

 private:
  std::vector<Tensor> adjoints_;
};

/// Records primitive tensor ops in topological order. A tape is confined to
/// one thread. Recording stops at finalize(); vjp() requires a finalized tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);

  Var record(Node node);

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  void finalize() { finalized_ = true; }
  bool finalized() const { return finalized_; }

  /// Forward-mode directional derivative of `outputs` with respect to the
  /// seed nodes, emitted as new taped nodes so the tangents can themselves
  /// be reverse-differentiated. Nodes that do not depend on any seed carry a
  /// zero tangent; the returned Var is then a constant zero of the output's
  /// shape.
  std::vector<Var> jvp(std::span<const Var> seeds, std::span<const Var> tangents,
                       std::span<const Var> outputs);

  Gradients vjp(std::span<const Cotangent> seeds) const;

 private:
  Var emit_tangent(int id, const std::vector<int>& tangent_of);
  void check_recording() const;

  std::vector<Node> nodes_;
  bool finalized_ = false;
};

// Primitive ops. All inputs must live on the same tape.
Var matmul(Var a, Var b);
/// a[m x n] + b broadcast over rows; b has n entries.
Var add_row_bias(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// k-th derivative of silu(x) = x * sigmoid(x), elementwise.
Var silu_deriv(Var a, int order);
inline Var silu(Var a) { return silu_deriv(a, 0); }
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, IndexList index);
/// out[index[r]] += a[r] over `segments` output rows.
Var segment_sum(Var a, IndexList index, std::size_t segments);
Var sum(Var a);
/// Repeats a row vector (n entries) into an [rows x n] matrix.
Var broadcast_rows(Var a, std::size_t rows);
Var reshape(Var a, Shape shape);
/// Valid (unpadded) cross-correlation. input [C,H,W], kernel [k,k,C,O].
Var conv2d(Var input, Var kernel, std::size_t stride);
Var add_channel_bias(Var a, Var bias);

inline Var sum_squares(Var a) { return sum(mul(a, a)); }

/// Scalar evaluation of the k-th derivative of silu.
double silu_derivative(double x, int order);

/// Function-level forward mode: d/de f(x + e*tangent) at e = 0.
template <typename Fn>
Tensor jvp(Fn&& fn, const Tensor& x, const Tensor& tangent);

/// Function-level reverse mode: cotangent^T (df/dx) at x.
template <typename Fn>
Tensor vjp(Fn&& fn, const Tensor& x, const Tensor& cotangent);

// --- template definitions -------------------------------------------------

template <typename Fn>
Tensor jvp(Fn&& fn, const Tensor& x, const Tensor& tangent) {
  if (x.shape() != tangent.shape()) {
    throw ShapeError("jvp: tangent shape " + shape_string(tangent.shape()) +
                     " does not match input " + shape_string(x.shape()));
  }
  Tape tape;
  Var in = tape.leaf(x);
  Var out = fn(in);
  Var t = tape.constant(tangent);
  return tape.jvp(std::span<const Var>(&in, 1), std::span<const Var>(&t, 1),
                  std::span<const Var>(&out, 1))
      .front()
      .value();
}

template <typename Fn>
Tensor vjp(Fn&& fn, const Tensor& x, const Tensor& cotangent) {
  Tape tape;
  Var in = tape.leaf(x);
  Var out = fn(in);
  tape.finalize();
  Cotangent seed{out, cotangent};
  return tape.vjp(std::span<const Cotangent>(&seed, 1)).wrt(in);
}

}  // namespace permflow
