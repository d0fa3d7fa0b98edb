#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "remi/datasets.hpp"
#include "remi/network.hpp"

namespace remi {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  Real learning_rate = 1e-2;
  Real momentum = 0.9;
  Real weight_decay = 5e-4;
  std::uint64_t seed = 0;
  std::optional<std::size_t> early_stop_patience;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  Real train_loss = 0;
  Real train_acc = 0;
  Real eval_loss = 0;
  Real eval_acc = 0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  Real wall_time_seconds = 0;
  /// Epoch whose parameters were returned (1-based).
  std::size_t returned_epoch = 0;

  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);
};

struct TrainResult {
  Network net;
  TrainLog log;
};

struct Evaluation {
  Real loss = 0;
  Real accuracy = 0;
};

/// Mini-batch momentum SGD on cross-entropy. Batch order for epoch e is
/// permutation(|data|, cfg.seed, e). With early stopping the parameters of
/// the lowest eval-loss epoch are returned.
TrainResult train(Network net, const Corpus& corpus, std::span<const std::size_t> data,
                  std::span<const std::size_t> eval, const TrainConfig& cfg);

/// Shadow model: same architecture and config as the target, trained on
/// shadow_in and evaluated on shadow_out. Initialized from mix_seed(cfg.seed, kShadowStream).
inline constexpr std::uint64_t kShadowStream = 0x5AD0;
TrainResult train_shadow(const Corpus& corpus, const SplitPlan& plan, const ArchSpec& arch, const TrainConfig& cfg);

/// Fraction of argmax-correct predictions; ties go to the lowest class id.
Real accuracy(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices);
Evaluation evaluate(const Network& net, const Corpus& corpus, std::span<const std::size_t> indices);
std::size_t argmax_row(const Tensor& probs, std::size_t row);

}  // namespace remi
