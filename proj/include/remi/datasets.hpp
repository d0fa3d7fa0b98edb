#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "remi/tensor.hpp"

namespace remi {

using IndexList = std::vector<std::size_t>;

struct Corpus {
  std::string name;
  Shape sample_shape;
  Tensor samples;  // [N x sample_shape...]
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const noexcept { return labels.size(); }
  /// Labels in range and N >= 4K.
  void validate() const;
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
};

struct ImageOptions {
  std::size_t side = 0;      // 0 keeps the native resolution; otherwise bilinear resize to side x side
  bool normalize = false;    // (x - mean) / stddev after scaling to [0,1]
  Real mean = 0.5;
  Real stddev = 0.5;
  std::size_t class_count = 0;  // 0 infers max(label) + 1
};

/// IDX pair (images magic 0x00000803, labels magic 0x00000801), pixels scaled to [0,1].
Corpus load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const ImageOptions& opts = {});

struct CsvSchema {
  std::size_t class_count = 0;  // required
  Shape sample_shape;           // empty means a flat feature vector
  std::string label_column = "label";
};

/// Header row required; every column except the label column is a feature.
Corpus load_csv(const std::filesystem::path& path, const CsvSchema& schema);

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  Real sigma = 1.0;
  /// Distance between any two class means.
  Real separation = 6.0;
  std::uint64_t seed = 0;
  /// Nonzero: dim must equal side*side and samples are shaped [1 x side x side].
  std::size_t image_side = 0;
};

/// Gaussian blobs; class c is centred at (separation / sqrt 2) * e_c.
Corpus make_synthetic(const SyntheticSpec& spec);

struct SplitPlan {
  IndexList target_train;
  IndexList target_test;
  IndexList shadow_in;
  IndexList shadow_out;
  std::uint64_t seed = 0;
};

/// Stratified four-way split into equal quarters; each list is sorted.
SplitPlan split(const Corpus& corpus, std::uint64_t seed);

struct ForgetSet {
  IndexList indices;               // sorted, subset of target_train
  Real ratio = 0;
  std::vector<Real> selection_scores;  // MF probability of each selected index, same order
};

/// Per class, takes the top-scoring samples by MF probability (ties by
/// ascending index). Quotas are floor(ratio * class size) with the remainder
/// up to round(ratio * |train|) handed to the lowest class ids.
ForgetSet select_forget_set(const Corpus& corpus, const SplitPlan& plan, std::span<const Real> mf_probs, Real ratio);

/// target_train \ forget, sorted.
IndexList remaining_set(const SplitPlan& plan, const ForgetSet& forget);

void to_json(nlohmann::json& j, const SplitPlan& plan);
void from_json(const nlohmann::json& j, SplitPlan& plan);
void to_json(nlohmann::json& j, const ForgetSet& forget);
void from_json(const nlohmann::json& j, ForgetSet& forget);

}  // namespace remi
