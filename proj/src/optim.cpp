#include "remi/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "remi/error.hpp"

namespace remi {

Real cross_entropy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2) fail(ErrorCode::dimension, "cross_entropy expects [B x K] probabilities");
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  if (labels.size() != batch) fail(ErrorCode::dimension, "cross_entropy: label count does not match batch");
  Real s = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      fail(ErrorCode::input, "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    s -= std::log(std::max(probs.at(b, static_cast<std::size_t>(y)), kProbEps));
  }
  return s / static_cast<Real>(batch);
}

Sgd::Sgd(SgdOptions opts) : opts_(opts) {
  if (!(opts_.learning_rate >= 0) || !(opts_.momentum >= 0 && opts_.momentum < 1) || !(opts_.weight_decay >= 0))
    fail(ErrorCode::input, "invalid SGD options");
}

void Sgd::step(std::span<Real> params, std::span<const Real> grads) {
  if (params.size() != grads.size())
    fail(ErrorCode::dimension, "sgd: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) + " parameters");
  if (!std::all_of(grads.begin(), grads.end(), [](Real g) { return std::isfinite(g); }))
    fail(ErrorCode::numeric, "sgd: non-finite gradient, step refused");
  if (velocity_.size() != params.size()) velocity_.assign(params.size(), 0.0);
  const Real lr = opts_.learning_rate, mu = opts_.momentum, wd = opts_.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Real g = grads[i] + wd * params[i];
    velocity_[i] = mu * velocity_[i] + g;
    params[i] -= lr * velocity_[i];
  }
}

void Sgd::step(Network& net, std::span<const Real> grads) {
  if (grads.size() != net.param_count())
    fail(ErrorCode::dimension, "sgd: gradient length " + std::to_string(grads.size()) + " != param_count " + std::to_string(net.param_count()));
  auto flat = net.flatten_params();
  step(std::span<Real>(flat), grads);
  net.unflatten_params(flat);
}

}  // namespace remi
