#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "remi/datasets.hpp"
#include "remi/network.hpp"
#include "remi/privacy_model.hpp"
#include "remi/training.hpp"

namespace remi {

/// proportional: each epoch shuffles D_f and D_o together and cuts joint
/// batches, so a batch holds the two sets in proportion to their sizes.
/// paired: one pass over D_f; each D_f batch is joined by an equally sized
/// D_o batch drawn from a reshuffled cycle over D_o.
enum class UnlearnBatching { proportional, paired };

struct UnlearnConfig {
  /// Weight of the privacy term; the fidelity term gets 1 - lambda2.
  Real lambda2 = 0.98;
  Real learning_rate = 0.01;
  Real momentum = 0.9;
  Real weight_decay = 0.0;
  std::size_t max_epochs = 100;
  /// Stop once the guide flags at most this fraction of D_f as members.
  Real stop_threshold = 0.0;
  std::size_t batch_size = 32;
  UnlearnBatching batching = UnlearnBatching::paired;
  std::uint64_t seed = 0;
  /// Rescales the step gradient to this L2 norm when exceeded; 0 disables.
  Real max_grad_norm = 0.0;
  /// Consecutive saturated zero-gradient steps tolerated before a stall error.
  std::size_t stall_patience = 20;

  Real lambda1() const noexcept { return 1.0 - lambda2; }
  void validate() const;
};

struct UnlearnEpoch {
  std::size_t epoch = 0;
  Real fidelity_loss = 0;  // L_Df + L_Do, averaged over the epoch's steps
  Real privacy_loss = 0;   // -log(1 - mean G + eps), averaged over steps that hold D_f samples
  Real total_loss = 0;     // lambda1 * fidelity + lambda2 * privacy
  Real mf_acc_df = 0;      // fraction of D_f the guide flags as members after the epoch
  Real mean_prob_df = 0;
  Real test_acc = 0;
  Real grad_norm = 0;      // mean pre-clipping gradient norm over the epoch's steps
  Real elapsed_seconds = 0;  // cumulative unlearning time at the end of the epoch
};

struct UnlearnTrace {
  std::vector<UnlearnEpoch> epochs;
  Real wall_time_seconds = 0;
  /// Portion of wall time spent building attack features and evaluating the privacy loss.
  Real privacy_loss_seconds = 0;
  std::size_t epochs_run = 0;
  bool reached_threshold = false;

  /// Columns: epoch,fidelity_loss,privacy_loss,mf_acc_df,test_acc
  void write_csv(const std::filesystem::path& path) const;
};

struct UnlearnResult {
  Network net;
  UnlearnTrace trace;
};

/// -log(1 - mean_prob + eps)
Real privacy_loss_value(Real mean_prob);
/// Privacy loss on the tape for attack features of D_f; gradient reaches the
/// probed network only through differentiable feature blocks.
Var privacy_loss(Tape& tape, const PrivacyModel& g, Var features);

/// Minimizes lambda1 * (L_Df + L_Do) + lambda2 * (-log(1 - G(I(w)|Df))) with
/// momentum SGD over batches cut per cfg.batching; a term whose set is absent
/// from a batch contributes zero. `g` is never modified.
/// `monitor` (defaults to D_o) only feeds test_acc and is excluded from timing.
UnlearnResult remi_unlearn(Network target, const Corpus& corpus, std::span<const std::size_t> forget,
                           std::span<const std::size_t> out_of_sample, const PrivacyModel& g, const UnlearnConfig& cfg,
                           std::span<const std::size_t> monitor = {});

/// Fresh model (same architecture, seed and config as the target) trained on D_r = target_train \ D_f.
TrainResult naive_retrain(const Corpus& corpus, const SplitPlan& plan, const ForgetSet& forget, const ArchSpec& arch,
                          const TrainConfig& cfg);

}  // namespace remi
