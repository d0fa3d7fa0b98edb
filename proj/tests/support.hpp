#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "remi/autograd.hpp"
#include "remi/network.hpp"
#include "remi/optim.hpp"

namespace remi::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, Real scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> n(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() % k);
  return y;
}

/// Mean cross-entropy through the tape; leaves gradients in the network.
inline Real tape_loss(Network& net, const Tensor& x, std::span<const int> y, Real scale = 1.0) {
  net.zero_grads();
  Tape t;
  Var p = net.forward(t, t.constant(x));
  Var l = ops::scale(t, ops::mean(t, ops::nll(t, p, y, kProbEps)), scale);
  t.backward(l);
  return t.value(l)[0];
}

inline Real plain_loss(const Network& net, const Tensor& x, std::span<const int> y) {
  return cross_entropy(net.predict(x), y);
}

/// Worst |ad - fd| / (|fd| + 1e-8) over every parameter, central differences.
inline Real worst_fd_error(Network net, const Tensor& x, std::span<const int> y, Real h = 1e-4) {
  tape_loss(net, x, y);
  const auto ad = net.flatten_grads();
  auto w = net.flatten_params();
  Real worst = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const Real w0 = w[i];
    w[i] = w0 + h;
    net.unflatten_params(w);
    const Real up = plain_loss(net, x, y);
    w[i] = w0 - h;
    net.unflatten_params(w);
    const Real down = plain_loss(net, x, y);
    w[i] = w0;
    const Real fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(ad[i] - fd) / (std::abs(fd) + 1e-8));
  }
  net.unflatten_params(w);
  return worst;
}

/// Hand-written backprop for dense/relu stacks ending in softmax.
/// Returns, per parametric layer, the squared L2 norm of d(-log p_y)/d(W,b).
inline std::vector<Real> manual_layer_sq_norms(const Network& net, std::span<const Real> x, int y) {
  struct Cache {
    std::vector<Real> in;
    std::vector<Real> out;
  };
  std::vector<Cache> caches;
  std::vector<Real> a(x.begin(), x.end());
  for (const auto& l : net.layers()) {
    Cache c{a, {}};
    if (l.kind == LayerKind::dense) {
      const std::size_t in = l.hyper[0], out = l.hyper[1];
      const auto& W = l.params[0];
      const auto& b = l.params[1];
      std::vector<Real> z(out);
      for (std::size_t o = 0; o < out; ++o) {
        Real s = b[o];
        for (std::size_t i = 0; i < in; ++i) s += W[o * in + i] * a[i];
        z[o] = s;
      }
      a = z;
    } else if (l.kind == LayerKind::relu) {
      for (auto& v : a) v = std::max(v, 0.0);
    } else if (l.kind == LayerKind::softmax) {
      Real m = a[0];
      for (auto v : a) m = std::max(m, v);
      Real s = 0;
      for (auto& v : a) s += (v = std::exp(v - m));
      for (auto& v : a) v /= s;
    }
    c.out = a;
    caches.push_back(std::move(c));
  }
  // d(-log p_y)/dz for softmax logits is p - onehot.
  std::vector<Real> delta = caches.back().out;
  delta[static_cast<std::size_t>(y)] -= 1.0;
  std::vector<Real> sq;
  for (std::size_t li = net.layers().size() - 1; li-- > 0;) {
    const auto& l = net.layers()[li];
    const auto& c = caches[li];
    if (l.kind == LayerKind::relu) {
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (c.in[i] <= 0) delta[i] = 0;
    } else if (l.kind == LayerKind::dense) {
      const std::size_t in = l.hyper[0], out = l.hyper[1];
      Real s = 0;
      for (std::size_t o = 0; o < out; ++o) {
        s += delta[o] * delta[o];
        for (std::size_t i = 0; i < in; ++i) s += (delta[o] * c.in[i]) * (delta[o] * c.in[i]);
      }
      sq.insert(sq.begin(), s);
      std::vector<Real> prev(in, 0.0);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) prev[i] += l.params[0][o * in + i] * delta[o];
      delta = prev;
    }
  }
  return sq;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("remi_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace remi::test
