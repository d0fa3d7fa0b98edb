#include "remi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include <sys/wait.h>
#include <unistd.h>

#include "remi/error.hpp"
#include "remi/random.hpp"

namespace remi {

using nlohmann::json;

const char* stage_name(Stage s) noexcept {
  switch (s) {
    case Stage::train: return "train";
    case Stage::attack_train: return "attack-train";
    case Stage::select_forget: return "select-forget";
    case Stage::unlearn: return "unlearn";
    case Stage::retrain: return "retrain";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (auto st : kAllStages)
    if (s == stage_name(st)) return st;
  fail(ErrorCode::config, "unknown stage '" + s + "'");
}

SeedPlan seed_plan(std::uint64_t seed) {
  return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), mix_seed(seed, 4), mix_seed(seed, 5)};
}

std::string ratio_tag(Real ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", ratio);
  return buf;
}

std::filesystem::path RunPaths::forget(Real ratio) const { return dir / ("forget_" + ratio_tag(ratio) + ".json"); }
std::filesystem::path RunPaths::unlearned(Real ratio, const std::string& guide) const {
  return dir / ("unlearned_" + ratio_tag(ratio) + "_" + guide + ".remi");
}
std::filesystem::path RunPaths::unlearn_trace(Real ratio, const std::string& guide) const {
  return dir / ("unlearn_trace_" + ratio_tag(ratio) + "_" + guide + ".csv");
}
std::filesystem::path RunPaths::unlearn_timing(Real ratio, const std::string& guide) const {
  return dir / ("unlearn_timing_" + ratio_tag(ratio) + "_" + guide + ".json");
}
std::filesystem::path RunPaths::retrained(Real ratio) const { return dir / ("retrained_" + ratio_tag(ratio) + ".remi"); }
std::filesystem::path RunPaths::retrain_log(Real ratio) const { return dir / ("retrain_log_" + ratio_tag(ratio) + ".csv"); }
std::filesystem::path RunPaths::retrain_timing(Real ratio) const {
  return dir / ("retrain_timing_" + ratio_tag(ratio) + ".json");
}

RunPaths run_paths(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.output_dir / ("seed_" + std::to_string(seed))};
}

std::vector<GuideSpec> unlearning_guides(const ExperimentConfig& cfg) {
  std::vector<GuideSpec> g{cfg.guide};
  if (cfg.cross_attack)
    g.push_back({cfg.guide.variant, cfg.guide.access == Access::white_box ? Access::black_box : Access::white_box});
  return g;
}

std::vector<GuideSpec> evaluators() {
  return {{Variant::mf, Access::white_box}, {Variant::mf, Access::black_box}, {Variant::mia, Access::white_box},
          {Variant::mia, Access::black_box}};
}

namespace {

std::string name_of(const GuideSpec& g) { return attack_model_name(g.variant, g.access); }

FeatureSpec spec_for(Access a) { return a == Access::white_box ? FeatureSpec::white_box() : FeatureSpec::black_box(); }

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "missing artifact " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::format, "cannot parse " + path.string() + ": " + e.what());
  }
}

SplitPlan load_split(const RunPaths& p) {
  try {
    return read_json(p.split()).get<SplitPlan>();
  } catch (const json::exception& e) {
    fail(ErrorCode::format, "bad split file: " + std::string(e.what()));
  }
}

ForgetSet load_forget(const RunPaths& p, Real ratio) {
  try {
    return read_json(p.forget(ratio)).get<ForgetSet>();
  } catch (const json::exception& e) {
    fail(ErrorCode::format, "bad forget-set file: " + std::string(e.what()));
  }
}

std::vector<Real> probs_on(const PrivacyModel& g, const Network& net, const Corpus& corpus,
                           std::span<const std::size_t> idx) {
  return attack_probs(g, extract_features(net, corpus, idx, g.spec, g.access));
}

void stage_train(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto sp = seed_plan(seed);
  const auto paths = run_paths(cfg, seed);
  std::filesystem::create_directories(paths.dir);
  const Corpus corpus = load_corpus(cfg.corpus);
  const SplitPlan plan = split(corpus, sp.split);
  write_json(paths.split(), plan);

  TrainConfig tc = cfg.train;
  tc.seed = sp.target;
  auto target = train(build_network(cfg.arch, corpus.sample_shape, corpus.class_count, tc.seed), corpus,
                      plan.target_train, plan.target_test, tc);
  save_checkpoint(target.net, paths.target());
  target.log.write_csv(paths.target_log());

  auto shadow = train_shadow(corpus, plan, cfg.arch, tc);
  save_checkpoint(shadow.net, paths.shadow());
  shadow.log.write_csv(paths.shadow_log());
}

void stage_attack_train(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto sp = seed_plan(seed);
  const auto paths = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(cfg.corpus);
  const SplitPlan plan = load_split(paths);
  const Network target = load_checkpoint(paths.target());
  const Network shadow = load_checkpoint(paths.shadow());
  std::uint64_t stream = 0;
  for (const auto& e : evaluators()) {
    const bool mf = e.variant == Variant::mf;
    const Network& probe = mf ? target : shadow;
    const FeatureSpec spec = spec_for(e.access);
    const auto records = build_attack_dataset(probe, corpus, mf ? plan.target_train : plan.shadow_in,
                                              mf ? plan.target_test : plan.shadow_out, spec, e.access,
                                              sp.attack_sampling);
    write_attack_csv(paths.attack_records(name_of(e)), records, spec);
    PrivacyTrainConfig pc = cfg.attack;
    pc.train.seed = mix_seed(sp.attack, ++stream);
    const auto g = train_privacy_model(records, pc, e.variant, e.access, spec, magnitude_columns(spec, probe));
    save_privacy_model(g, paths.attack_model(name_of(e)));
  }
}

void stage_select_forget(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto paths = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(cfg.corpus);
  const SplitPlan plan = load_split(paths);
  const Network target = load_checkpoint(paths.target());
  const PrivacyModel guide = load_privacy_model(paths.attack_model(name_of(cfg.guide)));
  const auto probs = probs_on(guide, target, corpus, plan.target_train);
  for (auto r : cfg.ratios) write_json(paths.forget(r), select_forget_set(corpus, plan, probs, r));
}

void stage_unlearn(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto sp = seed_plan(seed);
  const auto paths = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(cfg.corpus);
  const SplitPlan plan = load_split(paths);
  const Network target = load_checkpoint(paths.target());
  for (const auto& gs : unlearning_guides(cfg)) {
    const PrivacyModel g = load_privacy_model(paths.attack_model(name_of(gs)));
    const Real tau = std::min(1.0, member_rate(probs_on(g, target, corpus, plan.target_test)) + cfg.stop_margin);
    for (auto r : cfg.ratios) {
      const ForgetSet forget = load_forget(paths, r);
      UnlearnConfig uc = cfg.unlearn;
      uc.seed = sp.unlearn;
      uc.stop_threshold = tau;
      auto res = remi_unlearn(target, corpus, forget.indices, plan.target_test, g, uc);
      save_checkpoint(res.net, paths.unlearned(r, name_of(gs)));
      res.trace.write_csv(paths.unlearn_trace(r, name_of(gs)));
      write_json(paths.unlearn_timing(r, name_of(gs)), json{{"wall_time_seconds", res.trace.wall_time_seconds},
                                                            {"privacy_loss_seconds", res.trace.privacy_loss_seconds},
                                                            {"epochs_run", res.trace.epochs_run},
                                                            {"reached_threshold", res.trace.reached_threshold},
                                                            {"tau", tau}});
    }
  }
}

void stage_retrain(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto sp = seed_plan(seed);
  const auto paths = run_paths(cfg, seed);
  const Corpus corpus = load_corpus(cfg.corpus);
  const SplitPlan plan = load_split(paths);
  TrainConfig tc = cfg.train;
  tc.seed = sp.target;
  for (auto r : cfg.ratios) {
    const ForgetSet forget = load_forget(paths, r);
    auto res = naive_retrain(corpus, plan, forget, cfg.arch, tc);
    save_checkpoint(res.net, paths.retrained(r));
    res.log.write_csv(paths.retrain_log(r));
    write_json(paths.retrain_timing(r), json{{"wall_time_seconds", res.log.wall_time_seconds}});
  }
}

std::filesystem::path report_json_path(const ExperimentConfig& cfg) { return cfg.output_dir / "report.json"; }

void stage_report(const ExperimentConfig& cfg) {
  RunReport report;
  if (std::filesystem::exists(report_json_path(cfg))) {
    try {
      report = read_json(report_json_path(cfg)).get<RunReport>();
    } catch (const json::exception& e) {
      fail(ErrorCode::format, "bad report.json: " + std::string(e.what()));
    }
  } else {
    report = evaluate_experiment(cfg);
  }
  emit_report(report, ReportFormat::csv, cfg.output_dir / "report.csv");
  emit_report(report, ReportFormat::markdown, cfg.output_dir / "report.md");
}

// Fills acc.<phase>.*, attack.<tag>.<evaluator>.*, and for the configured
// guide mean_prob/kl/efficacy of `phase`.
void measure(RunCell& cell, const std::string& phase, const std::string& attack_tag, const Network& net,
             const Corpus& corpus, const SplitPlan& plan, const ForgetSet& forget, const IndexList& remaining,
             const std::map<std::string, PrivacyModel>& evals, const std::string& guide_name, bool with_accuracy) {
  auto& m = cell.metrics;
  if (with_accuracy) {
    m["acc." + phase + ".df"] = accuracy(net, corpus, forget.indices);
    m["acc." + phase + ".dr"] = accuracy(net, corpus, remaining);
    m["acc." + phase + ".test"] = accuracy(net, corpus, plan.target_test);
  }
  for (const auto& [name, g] : evals) {
    const auto pf = probs_on(g, net, corpus, forget.indices);
    const auto po = probs_on(g, net, corpus, plan.target_test);
    m["attack." + attack_tag + "." + name + ".df"] = member_rate(pf);
    m["attack." + attack_tag + "." + name + ".do"] = member_rate(po);
    if (with_accuracy && name == guide_name) {
      m["mean_prob." + phase + ".df"] = mean_of(pf);
      m["mean_prob." + phase + ".do"] = mean_of(po);
      m["kl." + phase] = kl_gaussian_shared(fit_gaussian(pf), fit_gaussian(po));
      m["efficacy_proxy." + phase] = efficacy_proxy(net, corpus, forget.indices);
    }
  }
}

RunCell evaluate_cell(const ExperimentConfig& cfg, std::uint64_t seed, Real ratio, const Corpus& corpus) {
  RunCell cell;
  cell.seed = seed;
  cell.ratio = ratio;
  const auto paths = run_paths(cfg, seed);
  if (std::filesystem::exists(paths.status())) {
    const auto st = read_json(paths.status());
    cell.complete = false;
    cell.failed_stage = st.value("stage", "");
    cell.message = st.value("message", "");
  }
  const std::string stage_before = cell.failed_stage;
  auto note = [&](const std::string& stage, const std::string& msg) {
    cell.complete = false;
    if (cell.failed_stage.empty()) {
      cell.failed_stage = stage;
      cell.message = msg;
    }
  };
  try {
    const SplitPlan plan = load_split(paths);
    const Network target = load_checkpoint(paths.target());
    std::map<std::string, PrivacyModel> evals;
    for (const auto& e : evaluators()) {
      evals.emplace(name_of(e), load_privacy_model(paths.attack_model(name_of(e))));
      cell.metrics["attack_heldout." + name_of(e)] = evals.at(name_of(e)).heldout_accuracy;
    }
    const ForgetSet forget = load_forget(paths, ratio);
    const IndexList remaining = remaining_set(plan, forget);
    cell.metrics["forget.size"] = static_cast<Real>(forget.indices.size());
    const std::string guide = name_of(cfg.guide);
    measure(cell, "before", "before", target, corpus, plan, forget, remaining, evals, guide, true);

    Real t_unlearn = -1;
    for (const auto& gs : unlearning_guides(cfg)) {
      const auto gname = name_of(gs);
      try {
        const Network after = load_checkpoint(paths.unlearned(ratio, gname));
        const bool primary = gname == guide;
        measure(cell, "after", "after." + gname, after, corpus, plan, forget, remaining, evals, guide, primary);
        if (primary) {
          const auto t = read_json(paths.unlearn_timing(ratio, gname));
          t_unlearn = t.at("wall_time_seconds").get<Real>();
          cell.metrics["time.unlearn"] = t_unlearn;
          cell.metrics["time.privacy_loss"] = t.at("privacy_loss_seconds").get<Real>();
          cell.metrics["unlearn.epochs"] = t.at("epochs_run").get<Real>();
          cell.metrics["unlearn.reached"] = t.at("reached_threshold").get<bool>() ? 1.0 : 0.0;
          cell.metrics["unlearn.tau"] = t.at("tau").get<Real>();
        }
      } catch (const Error& e) {
        note("unlearn", e.what());
      }
    }
    try {
      const Network retrained = load_checkpoint(paths.retrained(ratio));
      measure(cell, "retrain", "retrain", retrained, corpus, plan, forget, remaining, evals, guide, true);
      const Real t_retrain = read_json(paths.retrain_timing(ratio)).at("wall_time_seconds").get<Real>();
      cell.metrics["time.retrain"] = t_retrain;
      if (t_unlearn > 0) cell.metrics["speedup"] = t_retrain / t_unlearn;
    } catch (const Error& e) {
      note("retrain", e.what());
    }
  } catch (const Error& e) {
    note(stage_before.empty() ? "evaluate" : stage_before, e.what());
  } catch (const json::exception& e) {
    note("evaluate", e.what());
  }
  return cell;
}

}  // namespace

void run_stage(const ExperimentConfig& cfg, Stage stage, std::uint64_t seed) {
  cfg.validate();
  switch (stage) {
    case Stage::train: return stage_train(cfg, seed);
    case Stage::attack_train: return stage_attack_train(cfg, seed);
    case Stage::select_forget: return stage_select_forget(cfg, seed);
    case Stage::unlearn: return stage_unlearn(cfg, seed);
    case Stage::retrain: return stage_retrain(cfg, seed);
    case Stage::evaluate:
    case Stage::report: fail(ErrorCode::input, std::string(stage_name(stage)) + " aggregates all seeds");
  }
}

void run_stage(const ExperimentConfig& cfg, Stage stage) {
  cfg.validate();
  if (stage == Stage::evaluate) {
    evaluate_experiment(cfg);
    return;
  }
  if (stage == Stage::report) return stage_report(cfg);
  for (auto s : cfg.seeds) run_stage(cfg, stage, s);
}

RunReport evaluate_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunReport report;
  report.experiment = cfg.name;
  report.architecture = cfg.arch.kind;
  report.guide = name_of(cfg.guide);
  const Corpus corpus = load_corpus(cfg.corpus);
  for (auto s : cfg.seeds)
    for (auto r : cfg.ratios) report.cells.push_back(evaluate_cell(cfg, s, r, corpus));
  std::filesystem::create_directories(cfg.output_dir);
  write_json(report_json_path(cfg), report);
  return report;
}

namespace {

void run_seed(const ExperimentConfig& cfg, std::uint64_t s) {
  const auto paths = run_paths(cfg, s);
  std::filesystem::create_directories(paths.dir);
  std::filesystem::remove(paths.status());
  for (auto stage : {Stage::train, Stage::attack_train, Stage::select_forget, Stage::unlearn, Stage::retrain}) {
    try {
      run_stage(cfg, stage, s);
    } catch (const Error& e) {
      write_json(paths.status(), json{{"stage", stage_name(stage)}, {"code", error_code_name(e.code())}, {"message", e.what()}});
      return;
    }
  }
}

}  // namespace

std::size_t worker_count() {
  const char* v = std::getenv("REMI_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) fail(ErrorCode::config, std::string("REMI_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t workers = std::min(worker_count(), cfg.seeds.size());
  if (workers <= 1) {
    for (auto s : cfg.seeds) run_seed(cfg, s);
  } else {
    std::size_t next = 0, running = 0;
    bool child_failed = false;
    while (next < cfg.seeds.size() || running > 0) {
      if (next < cfg.seeds.size() && running < workers) {
        const auto s = cfg.seeds[next++];
        const pid_t pid = ::fork();
        if (pid < 0) fail(ErrorCode::state, "fork failed");
        if (pid == 0) {
          int rc = 0;
          try {
            run_seed(cfg, s);
          } catch (...) {
            rc = 1;
          }
          std::_Exit(rc);
        }
        ++running;
        continue;
      }
      int status = 0;
      if (::wait(&status) > 0) {
        --running;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) child_failed = true;
      }
    }
    if (child_failed) fail(ErrorCode::state, "a seed worker exited abnormally");
  }
  RunReport report = evaluate_experiment(cfg);
  emit_report(report, ReportFormat::csv, cfg.output_dir / "report.csv");
  emit_report(report, ReportFormat::markdown, cfg.output_dir / "report.md");
  return report;
}

std::vector<CrossAttackEntry> cross_attack_eval(const std::map<std::string, Network>& unlearned_by_guide,
                                                const Network& target_before, const Corpus& corpus,
                                                std::span<const std::size_t> forget,
                                                std::span<const std::size_t> out_of_sample,
                                                const std::map<std::string, PrivacyModel>& evaluators) {
  if (forget.empty() || out_of_sample.empty()) fail(ErrorCode::input, "cross_attack_eval needs non-empty D_f and D_o");
  std::vector<CrossAttackEntry> out;
  for (const auto& [ename, g] : evaluators) {
    const Real bf = member_rate(probs_on(g, target_before, corpus, forget));
    const Real bo = member_rate(probs_on(g, target_before, corpus, out_of_sample));
    for (const auto& [gname, net] : unlearned_by_guide)
      out.push_back({gname, ename, bf, member_rate(probs_on(g, net, corpus, forget)), bo,
                     member_rate(probs_on(g, net, corpus, out_of_sample))});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.guide < b.guide; });
  return out;
}

Real efficacy_proxy(const Network& net, const Corpus& corpus, std::span<const std::size_t> forget) {
  if (forget.empty()) fail(ErrorCode::input, "efficacy_proxy needs a non-empty D_f");
  const Tensor norms = gradient_summaries(net, corpus.batch(forget), corpus.labels_of(forget), GradientReduction::per_layer_norms);
  Real total = 0;
  for (std::size_t i = 0; i < norms.dim(0); ++i)
    for (std::size_t j = 0; j < norms.dim(1); ++j) total += norms.at(i, j) * norms.at(i, j);
  return 1.0 / std::max(kEfficacyEps, total / static_cast<Real>(forget.size()));
}

}  // namespace remi
