#include "remi/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "remi/error.hpp"

namespace remi {

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) fail(ErrorCode::state, "variable does not belong to this tape");
  return nodes_[v.id];
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) fail(ErrorCode::state, "variable does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::bind(Tensor& param) {
  Node n;
  n.value = param;
  n.value.drop_grad();
  n.needs_grad = true;
  n.bound = &param;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  if (!value.all_finite()) fail(ErrorCode::numeric, "non-finite value produced by an operation");
  Node n;
  n.value = std::move(value);
  for (auto in : inputs) n.needs_grad = n.needs_grad || node(in).needs_grad;
  if (n.needs_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).needs_grad; }

std::span<const Real> Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!backward_done_ || !n.needs_grad) fail(ErrorCode::state, "gradient requested before backward");
  return n.grad;
}

std::span<Real> Tape::grad_mut(Var v) { return node(v).grad; }

void Tape::backward(Var root, Real seed) {
  if (nodes_.empty()) fail(ErrorCode::state, "backward called on an empty tape");
  Node& r = node(root);
  if (r.value.size() != 1) fail(ErrorCode::dimension, "backward root must be a scalar, got " + shape_str(r.value.shape()));
  if (backward_done_) fail(ErrorCode::state, "backward already ran on this tape");
  for (std::size_t i = 0; i <= root.id; ++i)
    if (nodes_[i].needs_grad) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
  backward_done_ = true;
  if (!r.needs_grad) return;
  r.grad[0] = seed;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.backward) n.backward(*this, Var{i});
  }
  for (std::size_t i = 0; i <= root.id; ++i) {
    Node& n = nodes_[i];
    if (!n.bound) continue;
    n.bound->ensure_grad();
    auto g = n.bound->grad();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
  }
}

namespace ops {
namespace {

void expect_rank(const Tensor& v, std::size_t rank, const char* op) {
  if (v.rank() != rank)
    fail(ErrorCode::dimension, std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_str(v.shape()));
}

}  // namespace

Var dense(Tape& t, Var x, Var weight, Var bias) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(weight);
  const Tensor& bv = t.value(bias);
  expect_rank(xv, 2, "dense");
  expect_rank(wv, 2, "dense");
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  if (wv.dim(1) != in || bv.size() != out)
    fail(ErrorCode::dimension, "dense: input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
  Tensor y({batch, out});
  const Real* xp = xv.data().data();
  const Real* wp = wv.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* xr = xp + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const Real* wr = wp + o * in;
      Real s = bv[o];
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * xr[i];
      y.at(b, o) = s;
    }
  }
  return t.record(std::move(y), {x, weight, bias}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    const Real* xp2 = tp.value(x).data().data();
    const Real* wp2 = tp.value(weight).data().data();
    if (tp.requires_grad(x)) {
      auto dx = tp.grad_mut(x);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o) {
          const Real g = dy[b * out + o];
          if (g == 0.0) continue;
          const Real* wr = wp2 + o * in;
          Real* dxr = dx.data() + b * in;
          for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
        }
    }
    if (tp.requires_grad(weight)) {
      auto dw = tp.grad_mut(weight);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o) {
          const Real g = dy[b * out + o];
          if (g == 0.0) continue;
          const Real* xr = xp2 + b * in;
          Real* dwr = dw.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
        }
    }
    if (tp.requires_grad(bias)) {
      auto db = tp.grad_mut(bias);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out; ++o) db[o] += dy[b * out + o];
    }
  });
}

Var conv2d(Tape& t, Var x, Var weight, Var bias, std::size_t stride, std::size_t pad) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(weight);
  const Tensor& bv = t.value(bias);
  expect_rank(xv, 4, "conv2d");
  expect_rank(wv, 4, "conv2d");
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k || bv.size() != cout)
    fail(ErrorCode::dimension, "conv2d: input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
  if (stride == 0 || h + 2 * pad < k || w + 2 * pad < k)
    fail(ErrorCode::dimension, "conv2d: kernel does not fit input " + shape_str(xv.shape()));
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  Tensor y({batch, cout, ho, wo});
  const Real* xp = xv.data().data();
  const Real* wp = wv.data().data();
  Real* yp = y.data().data();
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      Real* yo = yp + (b * cout + o) * ho * wo;
      std::fill(yo, yo + ho * wo, bv[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const Real* xc = xp + (b * cin + c) * h * w;
        const Real* wc = wp + (o * cin + c) * k * k;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const Real wk = wc[ky * k + kx];
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
              if (iy < 0 || iy >= ih) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
                if (ix < 0 || ix >= iw) continue;
                yo[oy * wo + ox] += wk * xc[iy * iw + ix];
              }
            }
          }
      }
    }
  return t.record(std::move(y), {x, weight, bias}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    const Real* xp2 = tp.value(x).data().data();
    const Real* wp2 = tp.value(weight).data().data();
    const bool gx = tp.requires_grad(x), gw = tp.requires_grad(weight);
    Real* dx = gx ? tp.grad_mut(x).data() : nullptr;
    Real* dw = gw ? tp.grad_mut(weight).data() : nullptr;
    if (tp.requires_grad(bias)) {
      auto db = tp.grad_mut(bias);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < cout; ++o) {
          const Real* dyo = dy.data() + (b * cout + o) * ho * wo;
          Real s = 0;
          for (std::size_t i = 0; i < ho * wo; ++i) s += dyo[i];
          db[o] += s;
        }
    }
    if (!gx && !gw) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < cout; ++o) {
        const Real* dyo = dy.data() + (b * cout + o) * ho * wo;
        for (std::size_t c = 0; c < cin; ++c) {
          const Real* xc = xp2 + (b * cin + c) * h * w;
          const Real* wc = wp2 + (o * cin + c) * k * k;
          Real* dxc = gx ? dx + (b * cin + c) * h * w : nullptr;
          Real* dwc = gw ? dw + (o * cin + c) * k * k : nullptr;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const Real wk = wc[ky * k + kx];
              Real acc = 0;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
                if (iy < 0 || iy >= ih) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
                  if (ix < 0 || ix >= iw) continue;
                  const Real g = dyo[oy * wo + ox];
                  acc += g * xc[iy * iw + ix];
                  if (dxc) dxc[iy * iw + ix] += g * wk;
                }
              }
              if (dwc) dwc[ky * k + kx] += acc;
            }
        }
      }
  });
}

Var relu(Tape& t, Var x) {
  Tensor y = t.value(x);
  for (auto& v : y.data()) v = v > 0 ? v : 0.0;
  return t.record(std::move(y), {x}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto xv = tp.value(x).data();
    auto dx = tp.grad_mut(x);
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xv[i] > 0) dx[i] += dy[i];
  });
}

Var maxpool2d(Tape& t, Var x, std::size_t kernel, std::size_t stride) {
  const Tensor& xv = t.value(x);
  expect_rank(xv, 4, "maxpool2d");
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (kernel == 0 || stride == 0 || h < kernel || w < kernel)
    fail(ErrorCode::dimension, "maxpool2d: window does not fit input " + shape_str(xv.shape()));
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  Tensor y({batch, ch, ho, wo});
  std::vector<std::size_t> argmax(y.size());
  const Real* xp = xv.data().data();
  for (std::size_t p = 0; p < batch * ch; ++p) {
    const Real* xc = xp + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (xc[idx] > xc[best]) best = idx;
          }
        const std::size_t o = p * ho * wo + oy * wo + ox;
        y[o] = xc[best];
        argmax[o] = p * h * w + best;
      }
  }
  return t.record(std::move(y), {x}, [=, argmax = std::move(argmax)](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax[o]] += dy[o];
  });
}

Var reshape(Tape& t, Var x, Shape shape) {
  Tensor y = t.value(x).reshaped(std::move(shape));
  return t.record(std::move(y), {x}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

Var softmax(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  expect_rank(xv, 2, "softmax");
  const std::size_t batch = xv.dim(0), k = xv.dim(1);
  Tensor y({batch, k});
  for (std::size_t b = 0; b < batch; ++b) {
    Real mx = xv.at(b, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, xv.at(b, j));
    Real s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (y.at(b, j) = std::exp(xv.at(b, j) - mx));
    for (std::size_t j = 0; j < k; ++j) y.at(b, j) /= s;
  }
  return t.record(std::move(y), {x}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto yv = tp.value(self).data();
    auto dx = tp.grad_mut(x);
    for (std::size_t b = 0; b < batch; ++b) {
      Real dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += dy[b * k + j] * yv[b * k + j];
      for (std::size_t j = 0; j < k; ++j) dx[b * k + j] += yv[b * k + j] * (dy[b * k + j] - dot);
    }
  });
}

Var nll(Tape& t, Var probs, std::span<const int> labels, Real eps) {
  const Tensor& pv = t.value(probs);
  expect_rank(pv, 2, "nll");
  const std::size_t batch = pv.dim(0), k = pv.dim(1);
  if (labels.size() != batch)
    fail(ErrorCode::dimension, "nll: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  std::vector<int> lab(labels.begin(), labels.end());
  for (int y : lab)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      fail(ErrorCode::input, "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
  Tensor out({batch});
  for (std::size_t b = 0; b < batch; ++b) out[b] = -std::log(std::max(pv.at(b, static_cast<std::size_t>(lab[b])), eps));
  return t.record(std::move(out), {probs}, [=, lab = std::move(lab)](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    const Tensor& p = tp.value(probs);
    auto dp = tp.grad_mut(probs);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t j = static_cast<std::size_t>(lab[b]);
      const Real pj = p.at(b, j);
      if (pj > eps) dp[b * k + j] -= dy[b] / pj;
    }
  });
}

Var mean(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  Real s = 0;
  for (auto v : xv.data()) s += v;
  const Real n = static_cast<Real>(xv.size());
  return t.record(Tensor({1}, {s / n}), {x}, [=](Tape& tp, Var self) {
    const Real g = tp.grad(self)[0] / n;
    for (auto& d : tp.grad_mut(x)) d += g;
  });
}

Var scale(Tape& t, Var x, Real c) {
  Tensor y = t.value(x);
  for (auto& v : y.data()) v *= c;
  return t.record(std::move(y), {x}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c * dy[i];
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.shape() != bv.shape())
    fail(ErrorCode::dimension, "add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return t.record(std::move(y), {a, b}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    for (Var in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      auto d = tp.grad_mut(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
    }
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::input, "concat_cols needs at least one part");
  const std::size_t batch = t.value(parts[0]).dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    if (v.rank() > 2 || v.dim(0) != batch)
      fail(ErrorCode::dimension, "concat_cols: part " + shape_str(v.shape()) + " incompatible with batch " + std::to_string(batch));
    widths.push_back(v.size() / batch);
    total += widths.back();
  }
  Tensor y({batch, total});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = t.value(parts[p]);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < widths[p]; ++j) y.at(b, off + j) = v[b * widths[p] + j];
    off += widths[p];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), inputs, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    std::size_t o = 0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
      if (tp.requires_grad(inputs[p])) {
        auto d = tp.grad_mut(inputs[p]);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t j = 0; j < widths[p]; ++j) d[b * widths[p] + j] += dy[b * total + o + j];
      }
      o += widths[p];
    }
  });
}

Var column(Tape& t, Var x, std::size_t j) {
  const Tensor& xv = t.value(x);
  expect_rank(xv, 2, "column");
  const std::size_t batch = xv.dim(0), k = xv.dim(1);
  if (j >= k) fail(ErrorCode::dimension, "column " + std::to_string(j) + " out of range");
  Tensor y({batch});
  for (std::size_t b = 0; b < batch; ++b) y[b] = xv.at(b, j);
  return t.record(std::move(y), {x}, [=](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    for (std::size_t b = 0; b < batch; ++b) dx[b * k + j] += dy[b];
  });
}

Var affine_cols(Tape& t, Var x, std::span<const Real> shift, std::span<const Real> inv_scale) {
  const Tensor& xv = t.value(x);
  expect_rank(xv, 2, "affine_cols");
  const std::size_t batch = xv.dim(0), k = xv.dim(1);
  if (shift.size() != k || inv_scale.size() != k)
    fail(ErrorCode::dimension, "affine_cols: " + std::to_string(shift.size()) + " coefficients for " + std::to_string(k) + " columns");
  Tensor y({batch, k});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < k; ++j) y.at(b, j) = (xv.at(b, j) - shift[j]) * inv_scale[j];
  std::vector<Real> inv(inv_scale.begin(), inv_scale.end());
  return t.record(std::move(y), {x}, [=, inv = std::move(inv)](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < k; ++j) dx[b * k + j] += dy[b * k + j] * inv[j];
  });
}

Var log_cols(Tape& t, Var x, std::span<const std::uint8_t> mask, Real floor) {
  const Tensor& xv = t.value(x);
  expect_rank(xv, 2, "log_cols");
  const std::size_t batch = xv.dim(0), k = xv.dim(1);
  if (mask.size() != k) fail(ErrorCode::dimension, "log_cols: mask of " + std::to_string(mask.size()) + " for " + std::to_string(k) + " columns");
  Tensor y = xv;
  Tensor slope({batch, k}, 1.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < k; ++j) {
      if (!mask[j]) continue;
      const Real v = xv.at(b, j);
      const Real arg = std::max(v, 0.0) + floor;
      y.at(b, j) = std::log(arg);
      slope.at(b, j) = v > 0 ? 1.0 / arg : 0.0;
    }
  return t.record(std::move(y), {x}, [x, slope = std::move(slope)](Tape& tp, Var self) {
    auto dy = tp.grad(self);
    auto dx = tp.grad_mut(x);
    const auto s = slope.data();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s[i];
  });
}

Var neg_log_complement(Tape& t, Var p, Real eps) {
  const Tensor& pv = t.value(p);
  if (pv.size() != 1) fail(ErrorCode::dimension, "neg_log_complement expects a scalar");
  const Real arg = std::max(1.0 - pv[0] + eps, eps);
  return t.record(Tensor({1}, {-std::log(arg)}), {p}, [=](Tape& tp, Var self) {
    tp.grad_mut(p)[0] += tp.grad(self)[0] / arg;
  });
}

}  // namespace ops
}  // namespace remi
