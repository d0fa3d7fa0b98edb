#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "remi/remi.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Options {
  std::string experiment;
  std::vector<std::string> sets;
  std::string output_dir;
  std::string seeds;
  std::string ratios;
  std::optional<unsigned long long> seed;
  std::string format = "markdown";
  bool quiet = false;
};

int report_error(const char* what, int status) {
  std::fprintf(stderr, "remi: %s failed [%s]: %s\n", what, remi_status_name(status), remi_last_error());
  return status == REMI_ERR_CONFIG ? kExitConfig : kExitStage;
}

// "1,2,3" -> "[1,2,3]"; an explicit JSON array passes through.
std::string as_json_list(const std::string& s) {
  if (!s.empty() && s.front() == '[') return s;
  return "[" + s + "]";
}

int configure(remi_experiment_t** exp, const Options& o) {
  int rc = remi_experiment_load(o.experiment.c_str(), exp);
  if (rc != REMI_OK) {
    report_error("loading experiment", rc);
    return kExitConfig;
  }
  auto set = [&](const std::string& key, const std::string& value) {
    const int st = remi_experiment_set(*exp, key.c_str(), value.c_str());
    if (st != REMI_OK) {
      std::fprintf(stderr, "remi: override %s=%s rejected: %s\n", key.c_str(), value.c_str(), remi_last_error());
      return false;
    }
    return true;
  };
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::fprintf(stderr, "remi: --set expects key=value, got '%s'\n", kv.c_str());
      return kExitConfig;
    }
    if (!set(kv.substr(0, eq), kv.substr(eq + 1))) return kExitConfig;
  }
  // Dedicated flags apply after --set so they take precedence.
  if (!o.output_dir.empty() && !set("output_dir", "\"" + o.output_dir + "\"")) return kExitConfig;
  if (!o.seeds.empty() && !set("seeds", as_json_list(o.seeds))) return kExitConfig;
  if (!o.ratios.empty() && !set("ratios", as_json_list(o.ratios))) return kExitConfig;
  return kExitOk;
}

int run_command(const std::string& command, const Options& o) {
  remi_experiment_t* exp = nullptr;
  int code = configure(&exp, o);
  if (code != kExitOk) {
    remi_experiment_free(exp);
    return code;
  }

  if (command == "run") {
    int complete = 0;
    const int st = remi_experiment_run(exp, &complete);
    if (st != REMI_OK) code = report_error("run", st);
    else if (!complete) {
      std::fprintf(stderr, "remi: run finished with incomplete cells; see %s/report.md\n", remi_experiment_output_dir(exp));
      code = kExitStage;
    }
  } else {
    const int st = o.seed ? remi_experiment_run_stage_seed(exp, command.c_str(), *o.seed)
                          : remi_experiment_run_stage(exp, command.c_str());
    if (st != REMI_OK) code = report_error(command.c_str(), st);
  }

  if (code == kExitOk && (command == "report" || command == "run") && !o.quiet) {
    char* text = nullptr;
    const int st = remi_experiment_render_report(exp, o.format.c_str(), &text);
    if (st != REMI_OK) {
      code = report_error("rendering report", st);
    } else {
      std::fputs(text, stdout);
      remi_string_free(text);
    }
  }
  if (code == kExitOk && !o.quiet && command != "report" && command != "run")
    std::fprintf(stderr, "remi: %s done, artifacts in %s\n", command.c_str(), remi_experiment_output_dir(exp));
  remi_experiment_free(exp);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ReMI machine-unlearning workbench"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(remi_version()));

  Options o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "Split the corpus, train the target and shadow networks"},
      {"attack-train", "Train the four attack models (MF/MIA x white/black box)"},
      {"select-forget", "Choose the forget set for every ratio"},
      {"unlearn", "Run ReMI unlearning for every ratio and guide"},
      {"retrain", "Retrain from scratch without the forget set"},
      {"evaluate", "Measure every run and write report.json"},
      {"report", "Write report.csv and report.md and print the report"},
      {"run", "Run every stage for every seed"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("experiment", o.experiment, "Experiment file (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", o.sets, "Override a field, e.g. unlearn.learning_rate=0.05 (repeatable)");
    sub->add_option("--output-dir", o.output_dir, "Override output_dir");
    sub->add_option("--seeds", o.seeds, "Override seeds, e.g. 1,2,3");
    sub->add_option("--ratios", o.ratios, "Override forget ratios, e.g. 0.01,0.1");
    sub->add_flag("-q,--quiet", o.quiet, "Suppress progress and report output");
    if (name != "run" && name != "evaluate" && name != "report")
      sub->add_option("--seed", o.seed, "Run the stage for this seed only");
    if (name == "report" || name == "run")
      sub->add_option("--format", o.format, "Printed report format")->check(CLI::IsMember({"markdown", "csv", "json"}));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  return run_command(app.get_subcommands().front()->get_name(), o);
}
