#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "remi/autograd.hpp"
#include "remi/datasets.hpp"
#include "remi/network.hpp"

namespace remi {

enum class Access { black_box, white_box };
enum class GradientReduction { last_layer_full, per_layer_norms };

const char* access_name(Access a) noexcept;
Access parse_access(const std::string& s);

/// Which feature blocks the attack sees and which of them carry gradient
/// back to the probed network inside the unlearning loss.
///
/// Layout: [posterior (K)] [one-hot predicted label (K)] [loss (1)]
///         [gradient summary (G)] [activations (A)]; disabled blocks are absent.
/// G is the number of parametric layers for per_layer_norms, or the weight+bias
/// count of the final dense layer for last_layer_full. A is the width of the
/// input to the final dense layer.
struct FeatureSpec {
  bool include_posterior = true;
  bool include_pred_label = true;
  bool include_loss = true;
  bool include_gradient = true;
  bool include_activations = false;
  GradientReduction gradient_reduction = GradientReduction::per_layer_norms;

  // Differentiability per block. Predicted label, gradient summary and
  // activations are always stop-gradient.
  bool differentiable_posterior = true;
  bool differentiable_loss = true;

  static FeatureSpec black_box();
  static FeatureSpec white_box();

  bool needs_white_box() const noexcept { return include_gradient || include_activations; }
  /// Throws input error for an empty spec, access error if white-box blocks
  /// are requested under black-box access.
  void validate(Access access) const;
  std::size_t feature_length(const Network& net) const;
};

/// 1 for the columns holding nonnegative magnitudes (loss, gradient summary)
/// in the layout of `spec` on `net`, 0 elsewhere.
std::vector<std::uint8_t> magnitude_columns(const FeatureSpec& spec, const Network& net);

void to_json(nlohmann::json& j, const FeatureSpec& spec);
void from_json(const nlohmann::json& j, FeatureSpec& spec);

struct AttackFeatureRecord {
  std::vector<Real> features;
  int membership = 0;  // 1 iff the sample trained the probed model
  std::size_t source_index = 0;
};

/// Features of a single sample; membership left at 0.
AttackFeatureRecord extract(const Network& net, const Tensor& sample, int label, const FeatureSpec& spec, Access access);

/// Features for corpus rows `indices`, one row each, in input order.
Tensor extract_features(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices,
                        const FeatureSpec& spec, Access access);

/// Per-sample gradient summary [B x G] of the cross-entropy loss. Works on a
/// private copy; `net` is not touched.
Tensor gradient_summaries(const Network& net, const Tensor& batch, std::span<const int> labels, GradientReduction reduction);

/// Assembles the feature matrix on `tape` from the network's output
/// probabilities. Blocks marked non-differentiable enter as constants.
/// `gradient_block` / `activation_block` must be supplied when enabled.
Var assemble_features(Tape& tape, Var probs, std::span<const int> labels, const FeatureSpec& spec,
                      const Tensor* gradient_block, const Tensor* activation_block);

/// Input of the final dense layer for each row of `batch`, [B x A].
Tensor penultimate_activations(const Network& net, const Tensor& batch);

/// Members labelled z=1, nonmembers z=0; the larger side is downsampled
/// (seeded) to the size of the smaller. Members first, each side in ascending
/// index order.
std::vector<AttackFeatureRecord> build_attack_dataset(const Network& net, const Corpus& corpus,
                                                      std::span<const std::size_t> members,
                                                      std::span<const std::size_t> nonmembers, const FeatureSpec& spec,
                                                      Access access, std::uint64_t seed);

void write_attack_csv(const std::filesystem::path& path, std::span<const AttackFeatureRecord> records, const FeatureSpec& spec);
std::vector<AttackFeatureRecord> read_attack_csv(const std::filesystem::path& path, FeatureSpec* spec = nullptr);

}  // namespace remi
