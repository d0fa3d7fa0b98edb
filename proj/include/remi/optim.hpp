#pragma once

#include <span>
#include <vector>

#include "remi/network.hpp"
#include "remi/tensor.hpp"

namespace remi {

/// Clamp applied inside every log of a probability.
inline constexpr Real kProbEps = 1e-12;

/// Mean negative log-likelihood of the labels under row-probability matrix `probs`.
Real cross_entropy(const Tensor& probs, std::span<const int> labels);

struct SgdOptions {
  Real learning_rate = 1e-2;
  Real momentum = 0.9;
  Real weight_decay = 5e-4;
};

/// Momentum SGD with coupled weight decay:
///   g <- g + wd * w;  v <- mu * v + g;  w <- w - lr * v
/// Velocity persists across step() calls.
class Sgd {
 public:
  explicit Sgd(SgdOptions opts);

  void step(std::span<Real> params, std::span<const Real> grads);
  /// Applies flattened `grads` to every parameter of `net`.
  void step(Network& net, std::span<const Real> grads);

  const SgdOptions& options() const noexcept { return opts_; }
  void reset() noexcept { velocity_.clear(); }

 private:
  SgdOptions opts_;
  std::vector<Real> velocity_;
};

}  // namespace remi
