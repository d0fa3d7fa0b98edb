#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "remi/attack_features.hpp"
#include "remi/network.hpp"
#include "remi/training.hpp"

namespace remi {

enum class Variant { mia, mf };
const char* variant_name(Variant v) noexcept;
Variant parse_variant(const std::string& s);

struct PrivacyTrainConfig {
  TrainConfig train{.epochs = 60, .batch_size = 32, .learning_rate = 0.05, .momentum = 0.9, .weight_decay = 5e-4, .seed = 0,
                    .early_stop_patience = {}};
  std::vector<std::uint32_t> hidden{64, 32};
  Real holdout_fraction = 0.3;
  std::size_t min_per_class = 20;
  /// Feed log(x + kMagnitudeFloor) instead of x for the magnitude columns.
  bool log_magnitudes = true;
};

inline constexpr Real kMagnitudeFloor = 1e-10;

/// Membership classifier G over attack features. Columns flagged in
/// log_columns are log-compressed, then all inputs are standardized with the
/// affine map fitted on the attack training split:
/// G(f) = softmax(mlp((t(f) - shift) * inv_scale))[1].
struct PrivacyModel {
  Network net;
  FeatureSpec spec;
  Variant variant = Variant::mf;
  Access access = Access::white_box;
  std::vector<Real> feature_shift;
  std::vector<Real> feature_inv_scale;
  std::vector<std::uint8_t> log_columns;  // empty: no compression
  Real heldout_accuracy = 0;
  std::vector<std::string> warnings;

  std::size_t feature_length() const noexcept { return feature_shift.size(); }
};

/// `magnitudes` is the magnitude_columns() mask of the record layout; it is
/// ignored unless cfg.log_magnitudes is set.
PrivacyModel train_privacy_model(std::span<const AttackFeatureRecord> records, const PrivacyTrainConfig& cfg, Variant variant,
                                 Access access, const FeatureSpec& spec, std::span<const std::uint8_t> magnitudes = {});

/// The input map t(f) applied before standardization.
std::vector<Real> compress_features(const PrivacyModel& g, std::span<const Real> features);

/// Membership probability of one feature vector.
Real attack_prob(const PrivacyModel& g, std::span<const Real> features);
/// Membership probability per row of a [B x F] feature matrix.
std::vector<Real> attack_probs(const PrivacyModel& g, const Tensor& features);
/// Differentiable version: G's parameters enter as constants, gradient flows
/// into `features`. Shape [B].
Var attack_prob_var(Tape& tape, const PrivacyModel& g, Var features);

/// mean(1[p > 0.5] == z)
Real attack_accuracy(std::span<const Real> probs, std::span<const int> membership);
/// Fraction of samples flagged as members (p > 0.5).
Real member_rate(std::span<const Real> probs);
Real mean_of(std::span<const Real> values);

struct GaussianFit {
  Real mu = 0;
  Real sigma = 1;
  std::size_t count = 0;
};

inline constexpr Real kSigmaFloor = 1e-6;

/// Sample mean and (n-1) standard deviation, floored at kSigmaFloor.
GaussianFit fit_gaussian(std::span<const Real> values);
/// KL(P || Q) between univariate normals, general closed form.
Real kl_gaussian(const GaussianFit& p, const GaussianFit& q);
/// Pooled standard deviation of two fits, floored at kSigmaFloor.
Real pooled_sigma(const GaussianFit& p, const GaussianFit& q);
/// Shared-sigma KL: (mu_p - mu_q)^2 / (2 sigma^2) with the pooled sigma.
Real kl_gaussian_shared(const GaussianFit& p, const GaussianFit& q);

/// Checkpoint at `path` plus sidecar `path` + ".json" (variant, access, spec, standardization).
void save_privacy_model(const PrivacyModel& g, const std::filesystem::path& path);
PrivacyModel load_privacy_model(const std::filesystem::path& path);

}  // namespace remi
