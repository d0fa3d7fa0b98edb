#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "remi/tensor.hpp"

namespace remi {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

class Tape;
using BackwardFn = std::function<void(Tape&, Var self)>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for backward.
class Tape {
 public:
  /// Value that never receives a gradient.
  Var constant(Tensor value);
  /// Input whose gradient is readable through grad() after backward().
  Var leaf(Tensor value);
  /// Parameter view: backward() accumulates into param.grad(). The tensor
  /// must outlive the tape.
  Var bind(Tensor& param);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::span<const Real> grad(Var v) const;
  /// Mutable gradient buffer; only valid while backward() is running.
  std::span<Real> grad_mut(Var v);

  /// Seeds d(root)/d(root) = seed and propagates to every input. The root must be scalar.
  void backward(Var root, Real seed = 1.0);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<Real> grad;
    bool needs_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
    Tensor* bound = nullptr;
  };
  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace ops {

Var dense(Tape& t, Var x, Var weight, Var bias);
Var conv2d(Tape& t, Var x, Var weight, Var bias, std::size_t stride, std::size_t pad);
Var relu(Tape& t, Var x);
Var maxpool2d(Tape& t, Var x, std::size_t kernel, std::size_t stride);
Var reshape(Tape& t, Var x, Shape shape);
/// Row-wise softmax over the last axis of a [B x K] value.
Var softmax(Tape& t, Var x);
/// Per-row -log(max(p[label], eps)) of a [B x K] probability matrix, shape [B].
Var nll(Tape& t, Var probs, std::span<const int> labels, Real eps);
Var mean(Tape& t, Var x);
Var scale(Tape& t, Var x, Real c);
Var add(Tape& t, Var a, Var b);
/// Concatenates [B x k_i] values column-wise; 1-D inputs count as [B x 1].
Var concat_cols(Tape& t, std::span<const Var> parts);
/// Column j of a [B x K] value, shape [B].
Var column(Tape& t, Var x, std::size_t j);
/// (x[:, j] - shift[j]) * inv_scale[j]
Var affine_cols(Tape& t, Var x, std::span<const Real> shift, std::span<const Real> inv_scale);
/// y = log(max(x, 0) + floor) on columns with mask[j] != 0, y = x elsewhere.
Var log_cols(Tape& t, Var x, std::span<const std::uint8_t> mask, Real floor);
/// -log(1 - p + eps) of a scalar p.
Var neg_log_complement(Tape& t, Var p, Real eps);

}  // namespace ops
}  // namespace remi
