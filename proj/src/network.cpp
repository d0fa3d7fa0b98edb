#include "remi/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "remi/error.hpp"

namespace remi {

const char* layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

namespace {

std::size_t expected_hyper(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return 2;
    case LayerKind::conv2d: return 5;
    case LayerKind::maxpool2d: return 2;
    default: return 0;
  }
}

std::vector<Shape> param_shapes(const Layer& l) {
  const auto& h = l.hyper;
  if (l.kind == LayerKind::dense) return {{h[1], h[0]}, {h[1]}};
  if (l.kind == LayerKind::conv2d) return {{h[1], h[0], h[2], h[2]}, {h[1]}};
  return {};
}

}  // namespace

Shape Layer::output_shape(const Shape& in) const {
  if (hyper.size() != expected_hyper(kind))
    fail(ErrorCode::format, std::string(layer_kind_name(kind)) + " layer has " + std::to_string(hyper.size()) + " hyperparameters");
  auto mismatch = [&]() -> Shape {
    fail(ErrorCode::dimension, std::string(layer_kind_name(kind)) + " layer cannot accept input " + shape_str(in));
  };
  switch (kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != hyper[0] || hyper[1] == 0) return mismatch();
      return {hyper[1]};
    case LayerKind::conv2d: {
      const std::size_t k = hyper[2], s = hyper[3], p = hyper[4];
      if (in.size() != 3 || in[0] != hyper[0] || hyper[1] == 0 || k == 0 || s == 0 || in[1] + 2 * p < k || in[2] + 2 * p < k)
        return mismatch();
      return {hyper[1], (in[1] + 2 * p - k) / s + 1, (in[2] + 2 * p - k) / s + 1};
    }
    case LayerKind::maxpool2d: {
      const std::size_t k = hyper[0], s = hyper[1];
      if (in.size() != 3 || k == 0 || s == 0 || in[1] < k || in[2] < k) return mismatch();
      return {in[0], (in[1] - k) / s + 1, (in[2] - k) / s + 1};
    }
    case LayerKind::relu: return in;
    case LayerKind::flatten: return {shape_size(in)};
    case LayerKind::softmax:
      if (in.size() != 1) return mismatch();
      return in;
  }
  return mismatch();
}

Network::Network(Shape sample_shape, std::vector<Layer> layers, std::uint64_t seed, bool initialize)
    : sample_shape_(std::move(sample_shape)), layers_(std::move(layers)), seed_(seed) {
  if (sample_shape_.empty() || shape_size(sample_shape_) == 0) fail(ErrorCode::dimension, "network input shape is empty");
  if (layers_.empty() || layers_.back().kind != LayerKind::softmax)
    fail(ErrorCode::format, "network must end with a softmax layer");
  Shape cur = sample_shape_;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Layer& l = layers_[i];
    if (l.kind == LayerKind::softmax && i + 1 != layers_.size())
      fail(ErrorCode::format, "softmax is only allowed as the final layer");
    cur = l.output_shape(cur);
    const auto shapes = param_shapes(l);
    if (!initialize) {
      if (l.params.size() != shapes.size()) fail(ErrorCode::format, "layer parameter count mismatch");
      for (std::size_t p = 0; p < shapes.size(); ++p)
        if (l.params[p].shape() != shapes[p]) fail(ErrorCode::format, "layer parameter shape mismatch");
    } else {
      l.params.clear();
      if (!shapes.empty()) {
        const Shape& ws = shapes[0];
        const std::size_t receptive = ws.size() == 4 ? ws[2] * ws[3] : 1;
        const Real fan_in = static_cast<Real>(ws[1] * receptive), fan_out = static_cast<Real>(ws[0] * receptive);
        const Real limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<Real> dist(-limit, limit);
        Tensor w(ws);
        for (auto& v : w.data()) v = dist(rng);
        l.params.push_back(std::move(w));
        l.params.emplace_back(shapes[1], 0.0);
      }
    }
    for (const auto& p : l.params) param_count_ += p.size();
  }
  class_count_ = cur[0];
}

std::size_t Network::parametric_layer_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.has_params() ? 1 : 0;
  return n;
}

namespace {

template <typename BindFn>
Var run_layers(Tape& tape, Var x, const std::vector<Layer>& layers, std::size_t count, const Shape& sample_shape, BindFn bind) {
  const Tensor& in = tape.value(x);
  if (in.rank() != sample_shape.size() + 1 || !std::equal(sample_shape.begin(), sample_shape.end(), in.shape().begin() + 1))
    fail(ErrorCode::dimension, "batch " + shape_str(in.shape()) + " does not match network input " + shape_str(sample_shape));
  if (!in.all_finite()) fail(ErrorCode::numeric, "non-finite value in network input");
  const std::size_t batch = in.dim(0);
  for (std::size_t i = 0; i < count; ++i) {
    const Layer& l = layers[i];
    switch (l.kind) {
      case LayerKind::dense:
        x = ops::dense(tape, x, bind(i, 0), bind(i, 1));
        break;
      case LayerKind::conv2d:
        x = ops::conv2d(tape, x, bind(i, 0), bind(i, 1), l.hyper[3], l.hyper[4]);
        break;
      case LayerKind::relu:
        x = ops::relu(tape, x);
        break;
      case LayerKind::maxpool2d:
        x = ops::maxpool2d(tape, x, l.hyper[0], l.hyper[1]);
        break;
      case LayerKind::flatten:
        x = ops::reshape(tape, x, {batch, tape.value(x).size() / batch});
        break;
      case LayerKind::softmax:
        x = ops::softmax(tape, x);
        break;
    }
  }
  return x;
}

}  // namespace

Var Network::forward(Tape& tape, Var batch, ParamMode mode) {
  if (mode == ParamMode::frozen) return forward_frozen(tape, batch);
  return run_layers(tape, batch, layers_, layers_.size(), sample_shape_,
                    [&](std::size_t i, std::size_t p) { return tape.bind(layers_[i].params[p]); });
}

Var Network::forward_frozen(Tape& tape, Var batch) const {
  return run_layers(tape, batch, layers_, layers_.size(), sample_shape_,
                    [&](std::size_t i, std::size_t p) { return tape.constant(layers_[i].params[p]); });
}

Tensor Network::predict(const Tensor& batch) const {
  if (batch.rank() == 0) fail(ErrorCode::dimension, "predict needs a batch");
  constexpr std::size_t kChunk = 512;
  const std::size_t n = batch.dim(0);
  Tensor out({n, class_count_});
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    Tape tape;
    Var x = tape.constant(batch.rows(start, count));
    Var y = forward_frozen(tape, x);
    auto v = tape.value(y).data();
    std::copy(v.begin(), v.end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * class_count_));
  }
  return out;
}

Tensor Network::activations(const Tensor& batch, std::size_t layer_count) const {
  if (layer_count > layers_.size()) fail(ErrorCode::input, "activations: layer count out of range");
  Tape tape;
  Var x = tape.constant(batch);
  Var y = run_layers(tape, x, layers_, layer_count, sample_shape_,
                     [&](std::size_t i, std::size_t p) { return tape.constant(layers_[i].params[p]); });
  return tape.value(y);
}

std::vector<Real> Network::flatten_params() const {
  std::vector<Real> flat;
  flat.reserve(param_count_);
  for (const auto& l : layers_)
    for (const auto& p : l.params) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

void Network::unflatten_params(std::span<const Real> flat) {
  if (flat.size() != param_count_)
    fail(ErrorCode::dimension, "expected " + std::to_string(param_count_) + " parameters, got " + std::to_string(flat.size()));
  std::size_t off = 0;
  for (auto& l : layers_)
    for (auto& p : l.params) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + p.size()), p.data().begin());
      off += p.size();
    }
}

std::vector<Real> Network::flatten_grads() const {
  std::vector<Real> flat;
  flat.reserve(param_count_);
  for (const auto& l : layers_)
    for (const auto& p : l.params) {
      if (p.has_grad())
        flat.insert(flat.end(), p.grad().begin(), p.grad().end());
      else
        flat.insert(flat.end(), p.size(), 0.0);
    }
  return flat;
}

void Network::zero_grads() {
  for (auto& l : layers_)
    for (auto& p : l.params) p.zero_grad();
}

NetworkBuilder::NetworkBuilder(Shape sample_shape) : sample_shape_(sample_shape), current_(std::move(sample_shape)) {}

NetworkBuilder& NetworkBuilder::dense(std::uint32_t out) {
  if (current_.size() != 1) flatten();
  Layer l{LayerKind::dense, {static_cast<std::uint32_t>(current_[0]), out}, {}};
  current_ = l.output_shape(current_);
  layers_.push_back(std::move(l));
  return *this;
}

NetworkBuilder& NetworkBuilder::conv2d(std::uint32_t out_channels, std::uint32_t kernel, std::uint32_t stride, std::uint32_t pad) {
  if (current_.size() != 3) fail(ErrorCode::dimension, "conv2d needs a CxHxW input, have " + shape_str(current_));
  Layer l{LayerKind::conv2d, {static_cast<std::uint32_t>(current_[0]), out_channels, kernel, stride, pad}, {}};
  current_ = l.output_shape(current_);
  layers_.push_back(std::move(l));
  return *this;
}

NetworkBuilder& NetworkBuilder::relu() {
  layers_.push_back(Layer{LayerKind::relu, {}, {}});
  return *this;
}

NetworkBuilder& NetworkBuilder::maxpool2d(std::uint32_t kernel, std::uint32_t stride) {
  Layer l{LayerKind::maxpool2d, {kernel, stride}, {}};
  current_ = l.output_shape(current_);
  layers_.push_back(std::move(l));
  return *this;
}

NetworkBuilder& NetworkBuilder::flatten() {
  layers_.push_back(Layer{LayerKind::flatten, {}, {}});
  current_ = {shape_size(current_)};
  return *this;
}

NetworkBuilder& NetworkBuilder::softmax() {
  if (current_.size() != 1) flatten();
  layers_.push_back(Layer{LayerKind::softmax, {}, {}});
  return *this;
}

Network NetworkBuilder::build(std::uint64_t seed) const { return Network(sample_shape_, layers_, seed); }

Network build_network(const ArchSpec& arch, const Shape& sample_shape, std::size_t class_count, std::uint64_t seed) {
  if (class_count < 2) fail(ErrorCode::config, "network needs at least two classes");
  NetworkBuilder b(sample_shape);
  if (arch.kind == "cnn") {
    if (sample_shape.size() != 3) fail(ErrorCode::config, "cnn architecture needs CxHxW samples, have " + shape_str(sample_shape));
    for (auto ch : arch.channels) b.conv2d(ch, 3, 1, 1).relu().maxpool2d(2, 2);
  } else if (arch.kind != "mlp") {
    fail(ErrorCode::config, "unknown architecture '" + arch.kind + "'");
  }
  for (auto h : arch.hidden) b.dense(h).relu();
  b.dense(static_cast<std::uint32_t>(class_count)).softmax();
  return b.build(seed);
}

// ---- checkpoint ----------------------------------------------------------

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : bytes_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorCode::format, "checkpoint truncated");
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

constexpr unsigned char kMagic[4] = {'R', 'E', 'M', 'I'};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Network& net) {
  Writer w;
  w.bytes.assign(std::begin(kMagic), std::end(kMagic));
  w.u32(kCheckpointVersion);
  w.u64(net.seed());
  w.u32(static_cast<std::uint32_t>(net.sample_shape().size()));
  for (auto d : net.sample_shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.hyper.size()));
    for (auto h : l.hyper) w.u32(h);
  }
  for (const auto& l : net.layers())
    for (const auto& p : l.params)
      for (auto v : p.data()) w.f64(v);
  return std::move(w.bytes);
}

Network decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    fail(ErrorCode::format, "not a REMI checkpoint (bad magic)");
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) fail(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t seed = r.u64();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) fail(ErrorCode::format, "implausible input rank " + std::to_string(rank));
  Shape sample;
  for (std::uint32_t i = 0; i < rank; ++i) sample.push_back(r.u32());
  const std::uint32_t count = r.u32();
  if (count == 0 || count > 4096) fail(ErrorCode::format, "implausible layer count " + std::to_string(count));
  std::vector<Layer> layers(count);
  for (auto& l : layers) {
    const std::uint32_t kind = r.u32();
    if (kind > static_cast<std::uint32_t>(LayerKind::softmax)) fail(ErrorCode::format, "unknown layer kind " + std::to_string(kind));
    l.kind = static_cast<LayerKind>(kind);
    const std::uint32_t nh = r.u32();
    if (nh != expected_hyper(l.kind)) fail(ErrorCode::format, "bad hyperparameter count for " + std::string(layer_kind_name(l.kind)));
    for (std::uint32_t i = 0; i < nh; ++i) l.hyper.push_back(r.u32());
  }
  // Validate composition before allocating parameter storage.
  Shape cur = sample;
  for (auto& l : layers) {
    cur = l.output_shape(cur);
    for (const auto& s : param_shapes(l)) {
      Tensor t(s);
      for (auto& v : t.data()) v = r.f64();
      l.params.push_back(std::move(t));
    }
  }
  if (!r.done()) fail(ErrorCode::format, "trailing bytes after checkpoint payload");
  return Network(std::move(sample), std::move(layers), seed, false);
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace remi
