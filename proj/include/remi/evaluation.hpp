#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "remi/attack_features.hpp"
#include "remi/datasets.hpp"
#include "remi/network.hpp"
#include "remi/privacy_model.hpp"
#include "remi/training.hpp"
#include "remi/unlearner.hpp"

namespace remi {

struct CorpusSpec {
  std::string kind = "synthetic";  // synthetic | idx | csv
  SyntheticSpec synthetic;
  std::filesystem::path images;  // idx
  std::filesystem::path labels;  // idx
  ImageOptions image;
  std::filesystem::path csv;
  CsvSchema schema;
};

Corpus load_corpus(const CorpusSpec& spec);

struct GuideSpec {
  Variant variant = Variant::mf;
  Access access = Access::white_box;
};

/// "mf_white_box", "mia_black_box", ...
std::string attack_model_name(Variant v, Access a);

struct ExperimentConfig {
  std::string name = "experiment";
  CorpusSpec corpus;
  ArchSpec arch;
  TrainConfig train;
  PrivacyTrainConfig attack;
  GuideSpec guide;
  /// seed and stop_threshold are derived per run.
  UnlearnConfig unlearn;
  /// tau = member rate of the guide on D_o under the original model + stop_margin.
  Real stop_margin = 0.05;
  std::vector<Real> ratios{0.01, 0.1};
  std::vector<std::uint64_t> seeds{1};
  /// Also unlearn with the guide of the other access mode for the 2x2 cross-attack matrix.
  bool cross_attack = true;
  std::filesystem::path output_dir = "runs/experiment";

  void validate() const;
};

/// Relative paths inside the document resolve against `base_dir`.
ExperimentConfig experiment_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
nlohmann::json read_experiment_document(const std::filesystem::path& path);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Sets a dotted key ("unlearn.learning_rate") in `doc`. `value` is parsed as
/// JSON when possible, otherwise stored as a string.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

enum class Stage { train, attack_train, select_forget, unlearn, retrain, evaluate, report };
const char* stage_name(Stage s) noexcept;
Stage parse_stage(const std::string& s);
inline constexpr Stage kAllStages[] = {Stage::train,   Stage::attack_train, Stage::select_forget, Stage::unlearn,
                                       Stage::retrain, Stage::evaluate,     Stage::report};

/// Per-seed seeds for every randomized step.
struct SeedPlan {
  std::uint64_t split, target, attack, attack_sampling, unlearn;
};
SeedPlan seed_plan(std::uint64_t seed);

/// Artifact locations for one seed.
struct RunPaths {
  std::filesystem::path dir;
  std::filesystem::path split() const { return dir / "split.json"; }
  std::filesystem::path target() const { return dir / "target.remi"; }
  std::filesystem::path target_log() const { return dir / "target_log.csv"; }
  std::filesystem::path shadow() const { return dir / "shadow.remi"; }
  std::filesystem::path shadow_log() const { return dir / "shadow_log.csv"; }
  std::filesystem::path attack_model(const std::string& name) const { return dir / ("attack_" + name + ".remi"); }
  std::filesystem::path attack_records(const std::string& name) const { return dir / ("attack_" + name + ".csv"); }
  std::filesystem::path forget(Real ratio) const;
  std::filesystem::path unlearned(Real ratio, const std::string& guide) const;
  std::filesystem::path unlearn_trace(Real ratio, const std::string& guide) const;
  std::filesystem::path unlearn_timing(Real ratio, const std::string& guide) const;
  std::filesystem::path retrained(Real ratio) const;
  std::filesystem::path retrain_log(Real ratio) const;
  std::filesystem::path retrain_timing(Real ratio) const;
  std::filesystem::path status() const { return dir / "status.json"; }
};
RunPaths run_paths(const ExperimentConfig& cfg, std::uint64_t seed);
/// "0.01" style tag used in artifact names.
std::string ratio_tag(Real ratio);

/// Guides used for unlearning: the configured one, plus the other access
/// mode when cross_attack is set.
std::vector<GuideSpec> unlearning_guides(const ExperimentConfig& cfg);
/// The four evaluators trained in attack-train, in report order.
std::vector<GuideSpec> evaluators();

/// Runs one stage for one seed. Throws on failure.
void run_stage(const ExperimentConfig& cfg, Stage stage, std::uint64_t seed);
/// Runs one stage for every seed (evaluate and report aggregate all seeds).
void run_stage(const ExperimentConfig& cfg, Stage stage);

/// One (seed, ratio) cell of the report. Metric names:
///   acc.{before,after,retrain}.{df,dr,test}
///   attack.before.<evaluator>.{df,do}, attack.retrain.<evaluator>.{df,do},
///   attack.after.<guide>.<evaluator>.{df,do}   (fraction flagged as member)
///   mean_prob.{before,after,retrain}.{df,do}  (configured guide's model)
///   kl.{before,after,retrain}, efficacy_proxy.{before,after,retrain}
///   time.unlearn, time.privacy_loss, time.retrain, speedup
///   unlearn.epochs, unlearn.reached, unlearn.tau, forget.size,
///   attack_heldout.<evaluator>
struct RunCell {
  std::uint64_t seed = 0;
  Real ratio = 0;
  bool complete = true;
  std::string failed_stage;
  std::string message;
  std::map<std::string, Real> metrics;

  std::optional<Real> get(const std::string& name) const;
};

struct RunReport {
  std::string experiment;
  std::string architecture;
  std::string guide;  // attack model that drove unlearning and forget-set selection
  std::vector<RunCell> cells;

  bool complete() const;
  const RunCell* find(std::uint64_t seed, Real ratio) const;
};

/// Wall-clock derived metrics (time.*, speedup); everything else is a pure
/// function of the persisted artifacts.
bool is_timing_metric(const std::string& name);

void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);

/// Seeds processed in parallel worker processes by run_experiment (REMI_WORKERS, default 1).
std::size_t worker_count();

/// Executes every stage for every seed. Stage failures are recorded in the
/// affected cells (failed_stage, message) and the report is marked incomplete.
RunReport run_experiment(const ExperimentConfig& cfg);
/// Builds the report from persisted artifacts; missing artifacts leave cells incomplete.
RunReport evaluate_experiment(const ExperimentConfig& cfg);

struct CrossAttackEntry {
  std::string guide;
  std::string evaluator;
  Real before_df = 0, after_df = 0;
  Real before_do = 0, after_do = 0;
};

/// Member rate of every evaluator on D_f and D_o, before (target) and after
/// (unlearned network of each guide).
std::vector<CrossAttackEntry> cross_attack_eval(const std::map<std::string, Network>& unlearned_by_guide,
                                                const Network& target_before, const Corpus& corpus,
                                                std::span<const std::size_t> forget,
                                                std::span<const std::size_t> out_of_sample,
                                                const std::map<std::string, PrivacyModel>& evaluators);

/// 1 / max(eps, mean over D_f of sum over parameters (d log p(y|x) / dw)^2).
Real efficacy_proxy(const Network& net, const Corpus& corpus, std::span<const std::size_t> forget);
inline constexpr Real kEfficacyEps = 1e-12;

enum class ReportFormat { csv, markdown };
std::string render_report(const RunReport& report, ReportFormat format);
void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path);
RunReport parse_report_csv(const std::string& text);

}  // namespace remi
