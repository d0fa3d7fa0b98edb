#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "remi/error.hpp"
#include "remi/evaluation.hpp"
#include "support.hpp"

using namespace remi;
using nlohmann::json;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::input;
}

json minimal_doc() {
  return json{{"name", "t"},
              {"corpus", {{"kind", "synthetic"}, {"classes", 3}, {"per_class", 40}, {"dim", 6}}},
              {"architecture", {{"kind", "mlp"}, {"hidden", {8}}}},
              {"ratios", {0.1}},
              {"seeds", {1, 2}},
              {"output_dir", "out"}};
}

RunReport sample_report() {
  RunReport r;
  r.experiment = "exp, \"quoted\"";
  r.architecture = "cnn";
  r.guide = "mf_white_box";
  RunCell a;
  a.seed = 1;
  a.ratio = 0.01;
  a.metrics = {{"acc.before.test", 0.1 + 0.2}, {"acc.after.test", 1.0 / 3.0}, {"kl.before", 1e-300}, {"speedup", 12.5}};
  RunCell b;
  b.seed = 18446744073709551615ULL;
  b.ratio = 0.1;
  b.complete = false;
  b.failed_stage = "unlearn";
  b.message = "line one\nline two, with comma";
  b.metrics = {{"acc.before.test", 0.25}};
  r.cells = {a, b};
  return r;
}

}  // namespace

TEST_CASE("experiment documents parse with defaults and strict keys") {
  const ExperimentConfig cfg = experiment_from_json(minimal_doc());
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(cfg.ratios == std::vector<Real>{0.1});
  CHECK(cfg.arch.kind == "mlp");
  CHECK(cfg.unlearn.lambda2 == 0.98);
  CHECK(cfg.stop_margin == 0.05);
  CHECK(cfg.output_dir == "out");

  auto doc = minimal_doc();
  doc["colour"] = "red";
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["unlearn"] = {{"lamda2", 0.5}};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["ratios"] = {0.0};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["ratios"] = {1.0};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["seeds"] = json::array();
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["train"] = {{"epochs", 0}};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["guide"] = {{"access", "grey_box"}};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
  doc = minimal_doc();
  doc["unlearn"] = {{"batching", "alternating"}};
  CHECK(code_of([&] { experiment_from_json(doc); }) == ErrorCode::config);
}

TEST_CASE("experiment config survives a JSON round trip") {
  auto doc = minimal_doc();
  doc["unlearn"] = {{"learning_rate", 0.02}, {"batching", "proportional"}, {"max_grad_norm", 2.0}};
  doc["guide"] = {{"variant", "mia"}, {"access", "black_box"}};
  const ExperimentConfig a = experiment_from_json(doc);
  const ExperimentConfig b = experiment_from_json(experiment_to_json(a));
  CHECK(experiment_to_json(a) == experiment_to_json(b));
  CHECK(b.unlearn.batching == UnlearnBatching::proportional);
  CHECK(b.guide.variant == Variant::mia);
  CHECK(b.guide.access == Access::black_box);
}

TEST_CASE("dotted overrides") {
  auto doc = minimal_doc();
  apply_override(doc, "unlearn.learning_rate", "0.05");
  apply_override(doc, "seeds", "[4,5,6]");
  apply_override(doc, "output_dir", "plain/text");
  apply_override(doc, "guide.access", "black_box");
  const ExperimentConfig cfg = experiment_from_json(doc);
  CHECK(cfg.unlearn.learning_rate == 0.05);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{4, 5, 6});
  CHECK(cfg.output_dir == "plain/text");
  CHECK(cfg.guide.access == Access::black_box);
  CHECK(code_of([&] { apply_override(doc, "", "1"); }) == ErrorCode::config);
  CHECK(code_of([&] { apply_override(doc, "seeds.x", "1"); }) == ErrorCode::config);
  CHECK(code_of([&] { apply_override(doc, "a..b", "1"); }) == ErrorCode::config);
}

TEST_CASE("experiment files resolve corpus paths next to the file") {
  remi::test::TempDir dir("cfg");
  {
    std::ofstream out(dir / "e.json");
    out << R"({
      // comments are allowed
      "corpus": {"kind": "csv", "csv": "data.csv", "class_count": 2},
      "output_dir": "o"
    })";
  }
  const ExperimentConfig cfg = load_experiment(dir / "e.json");
  CHECK(cfg.corpus.csv == dir / "data.csv");
  CHECK(cfg.output_dir == "o");
  CHECK(code_of([&] { load_experiment(dir / "missing.json"); }) == ErrorCode::config);
  {
    std::ofstream out(dir / "bad.json");
    out << "{ not json";
  }
  CHECK(code_of([&] { load_experiment(dir / "bad.json"); }) == ErrorCode::config);
}

TEST_CASE("stage names") {
  for (auto s : kAllStages) CHECK(parse_stage(stage_name(s)) == s);
  CHECK(std::string(stage_name(Stage::attack_train)) == "attack-train");
  CHECK(std::string(stage_name(Stage::select_forget)) == "select-forget");
  CHECK(code_of([] { parse_stage("finetune"); }) == ErrorCode::config);
}

TEST_CASE("seed plans and artifact names") {
  const SeedPlan a = seed_plan(1), b = seed_plan(2);
  const std::set<std::uint64_t> all{a.split, a.target, a.attack, a.attack_sampling, a.unlearn,
                                    b.split, b.target, b.attack, b.attack_sampling, b.unlearn};
  CHECK(all.size() == 10);
  CHECK(ratio_tag(0.01) == "0.01");
  CHECK(ratio_tag(0.1) == "0.1");
  ExperimentConfig cfg = experiment_from_json(minimal_doc());
  const RunPaths p = run_paths(cfg, 7);
  CHECK(p.dir == std::filesystem::path("out") / "seed_7");
  CHECK(p.unlearned(0.1, "mf_white_box").filename() == "unlearned_0.1_mf_white_box.remi");
  CHECK(p.forget(0.25).filename() == "forget_0.25.json");
  CHECK(attack_model_name(Variant::mia, Access::black_box) == "mia_black_box");
  CHECK(evaluators().size() == 4);
  CHECK(unlearning_guides(cfg).size() == 2);
  cfg.cross_attack = false;
  CHECK(unlearning_guides(cfg).size() == 1);
}

TEST_CASE("efficacy proxy matches a per-sample gradient loop") {
  SyntheticSpec s;
  s.classes = 3;
  s.per_class = 10;
  s.dim = 5;
  s.seed = 8;
  const Corpus c = make_synthetic(s);
  const Network net = NetworkBuilder({5}).dense(7).relu().dense(4).relu().dense(3).softmax().build(12);
  IndexList forget{0, 3, 7, 12, 19, 25};
  Real total = 0;
  for (auto i : forget) {
    const Tensor x = c.batch(std::span(&i, 1));
    for (auto sq : remi::test::manual_layer_sq_norms(net, x.data(), c.labels[i])) total += sq;
  }
  const Real expect = 1.0 / (total / static_cast<Real>(forget.size()));
  const Real got = efficacy_proxy(net, c, forget);
  CHECK(std::abs(got - expect) <= 1e-8 * expect);
  CHECK_THROWS_AS(efficacy_proxy(net, c, IndexList{}), Error);
}

TEST_CASE("efficacy proxy is capped when gradients vanish") {
  Corpus c;
  c.sample_shape = {2};
  c.class_count = 2;
  c.samples = Tensor({8, 2});
  for (std::size_t i = 0; i < 8; ++i) {
    c.labels.push_back(0);
    c.samples[i * 2] = 1.0;
  }
  Network net = NetworkBuilder({2}).dense(2).softmax().build(1);
  auto& l = net.layers()[0];
  for (auto& v : l.params[0].data()) v = 0;
  for (auto& v : l.params[1].data()) v = 0;
  l.params[0][0] = 1000;  // p(class 0) == 1 exactly
  const IndexList all{0, 1, 2, 3};
  CHECK(efficacy_proxy(net, c, all) == 1.0 / kEfficacyEps);
}

TEST_CASE("report csv round trip is exact") {
  const RunReport r = sample_report();
  const std::string csv = render_report(r, ReportFormat::csv);
  const RunReport back = parse_report_csv(csv);
  CHECK(back.experiment == r.experiment);
  CHECK(back.architecture == r.architecture);
  CHECK(back.guide == r.guide);
  REQUIRE(back.cells.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.cells[i].seed == r.cells[i].seed);
    CHECK(back.cells[i].ratio == r.cells[i].ratio);
    CHECK(back.cells[i].complete == r.cells[i].complete);
    CHECK(back.cells[i].failed_stage == r.cells[i].failed_stage);
    CHECK(back.cells[i].message == r.cells[i].message);
    CHECK(back.cells[i].metrics == r.cells[i].metrics);
  }
  CHECK(render_report(back, ReportFormat::csv) == csv);
  CHECK(csv.substr(0, csv.find('\n')) ==
        "experiment,architecture,guide,seed,ratio,complete,failed_stage,message,acc.after.test,acc.before.test,kl.before,speedup");
  CHECK_THROWS_AS(parse_report_csv("nope\n"), Error);
  CHECK_THROWS_AS(parse_report_csv(""), Error);

  const RunReport j = json(r).get<RunReport>();
  CHECK(j.cells[1].metrics == r.cells[1].metrics);
}

TEST_CASE("markdown report structure and incomplete markers") {
  const RunReport r = sample_report();
  const std::string md = render_report(r, ReportFormat::markdown);
  CHECK(md.find("Status: incomplete") != std::string::npos);
  CHECK(md.find("incomplete (stage unlearn)") != std::string::npos);
  CHECK(md.find("efficacy_proxy") != std::string::npos);
  for (const char* phase : {"Original", "ReMI", "Retrain"})
    for (const char* ratio : {"| 0.01 |", "| 0.1 |"}) {
      std::size_t rows = 0;
      std::istringstream lines(md);
      for (std::string line; std::getline(lines, line);)
        if (line.rfind("| cnn |", 0) == 0 && line.find(ratio) != std::string::npos &&
            line.find(std::string("| ") + phase + " |") != std::string::npos)
          ++rows;
      CHECK(rows == 1);
    }
  // Missing metric of a complete cell reads n/a; of a failed cell reads incomplete.
  CHECK(md.find("| cnn | 1 | 0.01 | Original | n/a | n/a | 0.300 |") != std::string::npos);
  CHECK(md.find("| 0.1 | ReMI | incomplete | incomplete | incomplete |") != std::string::npos);
}

TEST_CASE("timing metrics are identified") {
  CHECK(is_timing_metric("time.unlearn"));
  CHECK(is_timing_metric("speedup"));
  CHECK(!is_timing_metric("acc.before.test"));
  CHECK(!is_timing_metric("unlearn.epochs"));
}

TEST_CASE("evaluating an empty output directory marks every cell incomplete") {
  remi::test::TempDir dir("eval");
  auto doc = minimal_doc();
  doc["output_dir"] = dir.path.string();
  const ExperimentConfig cfg = experiment_from_json(doc);
  const RunReport r = evaluate_experiment(cfg);
  REQUIRE(r.cells.size() == 2);
  CHECK(!r.complete());
  for (const auto& c : r.cells) {
    CHECK(!c.complete);
    CHECK(c.message.find("missing") != std::string::npos);
  }
}

TEST_CASE("worker count comes from the environment") {
  ::unsetenv("REMI_WORKERS");
  CHECK(worker_count() == 1);
  ::setenv("REMI_WORKERS", "3", 1);
  CHECK(worker_count() == 3);
  ::setenv("REMI_WORKERS", "zero", 1);
  CHECK(code_of([] { worker_count(); }) == ErrorCode::config);
  ::unsetenv("REMI_WORKERS");
}
