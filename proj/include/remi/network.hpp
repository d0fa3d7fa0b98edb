#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "remi/autograd.hpp"
#include "remi/tensor.hpp"

namespace remi {

// Values are persisted in checkpoints.
enum class LayerKind : std::uint32_t {
  dense = 0,
  conv2d = 1,
  relu = 2,
  maxpool2d = 3,
  flatten = 4,
  softmax = 5,
};

const char* layer_kind_name(LayerKind kind) noexcept;

/// One stage of a Network. Hyperparameter layout by kind:
///   dense:     {in, out}
///   conv2d:    {in_channels, out_channels, kernel, stride, pad}
///   maxpool2d: {kernel, stride}
///   relu, flatten, softmax: {}
/// dense and conv2d own {weight, bias}; the others own nothing.
struct Layer {
  LayerKind kind = LayerKind::relu;
  std::vector<std::uint32_t> hyper;
  std::vector<Tensor> params;

  bool has_params() const noexcept { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
  Shape output_shape(const Shape& sample_in) const;
};

/// Parameters enter the tape as trainable (gradient accumulated into the
/// layer tensors) or frozen (constants, never touched by backward).
enum class ParamMode { trainable, frozen };

class Network {
 public:
  Network() = default;
  /// Validates that layer shapes compose and that softmax is the single final
  /// layer, then initializes parameters from `seed` unless `initialize` is false.
  Network(Shape sample_shape, std::vector<Layer> layers, std::uint64_t seed, bool initialize = true);

  /// probs[B x K] for a batch whose trailing dims equal sample_shape().
  Var forward(Tape& tape, Var batch, ParamMode mode = ParamMode::trainable);
  Var forward_frozen(Tape& tape, Var batch) const;
  /// Forward without gradient bookkeeping for the caller; chunks large batches.
  Tensor predict(const Tensor& batch) const;
  /// Output of the first `layer_count` layers for `batch`.
  Tensor activations(const Tensor& batch, std::size_t layer_count) const;

  const Shape& sample_shape() const noexcept { return sample_shape_; }
  std::size_t input_size() const noexcept { return shape_size(sample_shape_); }
  std::size_t class_count() const noexcept { return class_count_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t param_count() const noexcept { return param_count_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  /// Number of layers that own parameters.
  std::size_t parametric_layer_count() const noexcept;

  std::vector<Real> flatten_params() const;
  void unflatten_params(std::span<const Real> flat);
  /// Gradients in flatten_params() order; zeros where no gradient exists.
  std::vector<Real> flatten_grads() const;
  void zero_grads();

 private:
  Shape sample_shape_;
  std::vector<Layer> layers_;
  std::uint64_t seed_ = 0;
  std::size_t param_count_ = 0;
  std::size_t class_count_ = 0;
};

/// Fluent construction; input dims of each layer are inferred.
class NetworkBuilder {
 public:
  explicit NetworkBuilder(Shape sample_shape);
  NetworkBuilder& dense(std::uint32_t out);
  NetworkBuilder& conv2d(std::uint32_t out_channels, std::uint32_t kernel, std::uint32_t stride = 1, std::uint32_t pad = 0);
  NetworkBuilder& relu();
  NetworkBuilder& maxpool2d(std::uint32_t kernel, std::uint32_t stride);
  NetworkBuilder& flatten();
  NetworkBuilder& softmax();
  Network build(std::uint64_t seed) const;

 private:
  Shape sample_shape_;
  Shape current_;
  std::vector<Layer> layers_;
};

/// Architecture description used by experiment files.
struct ArchSpec {
  std::string kind = "cnn";  // "cnn" or "mlp"
  std::vector<std::uint32_t> channels{8, 16, 16};  // cnn: one conv3x3+relu+maxpool2 block per entry
  std::vector<std::uint32_t> hidden{32};           // dense hidden layers before the classifier
};

Network build_network(const ArchSpec& arch, const Shape& sample_shape, std::size_t class_count, std::uint64_t seed);

/// Checkpoint layout (little-endian): "REMI", u32 version, u64 seed,
/// u32 sample rank, u32 dims..., u32 layer count, per layer {u32 kind,
/// u32 hyper count, u32 hyper...}, then every parameter tensor in
/// declaration order as raw f64.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);
std::vector<unsigned char> encode_checkpoint(const Network& net);
Network decode_checkpoint(std::span<const unsigned char> bytes);

}  // namespace remi
