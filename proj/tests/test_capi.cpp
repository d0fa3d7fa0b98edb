#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "remi/remi.h"

namespace {

struct Dir {
  std::filesystem::path path;
  Dir() {
    path = std::filesystem::temp_directory_path() / ("remi_capi_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~Dir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

const char* kTiny = R"({
  "name": "tiny",
  "corpus": {"kind": "synthetic", "classes": 2, "per_class": 60, "dim": 6, "sigma": 1.0, "separation": 2.0, "seed": 3},
  "architecture": {"kind": "mlp", "hidden": [16]},
  "train": {"epochs": 8},
  "attack": {"epochs": 5, "hidden": [8]},
  "unlearn": {"max_epochs": 3},
  "ratios": [0.1],
  "seeds": [1]
})";

}  // namespace

TEST_CASE("status names and null handling") {
  CHECK(std::string(remi_status_name(REMI_OK)) == "ok");
  CHECK(std::string(remi_status_name(REMI_ERR_CONFIG)) == "config error");
  CHECK(std::string(remi_status_name(REMI_ERR_ACCESS)) == "access error");
  CHECK(std::string(remi_status_name(12345)) == "unknown error");
  CHECK(remi_experiment_load(nullptr, nullptr) == REMI_ERR_NULL);
  CHECK(std::strlen(remi_last_error()) > 0);
  CHECK(std::string(remi_version()).size() > 0);
  remi_experiment_free(nullptr);
  remi_network_free(nullptr);
  remi_string_free(nullptr);
}

TEST_CASE("experiment handles parse, override and report errors") {
  remi_experiment_t* exp = nullptr;
  CHECK(remi_experiment_parse("{ broken", nullptr, &exp) == REMI_ERR_CONFIG);
  CHECK(exp == nullptr);
  CHECK(remi_experiment_parse(R"({"unknown": 1})", nullptr, &exp) == REMI_ERR_CONFIG);
  CHECK(std::string(remi_last_error()).find("unknown") != std::string::npos);
  CHECK(remi_experiment_load("/nonexistent/e.json", &exp) == REMI_ERR_CONFIG);

  REQUIRE(remi_experiment_parse(kTiny, nullptr, &exp) == REMI_OK);
  CHECK(remi_experiment_set(exp, "unlearn.lambda2", "2.0") == REMI_ERR_CONFIG);
  CHECK(remi_experiment_set(exp, "nope", "1") == REMI_ERR_CONFIG);
  // A rejected override leaves the handle unchanged.
  char* json = nullptr;
  REQUIRE(remi_experiment_config(exp, &json) == REMI_OK);
  CHECK(std::string(json).find("\"lambda2\": 0.98") != std::string::npos);
  remi_string_free(json);
  CHECK(remi_experiment_set(exp, "output_dir", "/tmp/x") == REMI_OK);
  CHECK(std::string(remi_experiment_output_dir(exp)) == "/tmp/x");
  CHECK(remi_experiment_run_stage(exp, "bogus") == REMI_ERR_CONFIG);
  char* text = nullptr;
  CHECK(remi_experiment_set(exp, "output_dir", "/nonexistent/remi_out") == REMI_OK);
  CHECK(remi_experiment_render_report(exp, "csv", &text) == REMI_ERR_IO);
  remi_experiment_free(exp);
}

TEST_CASE("stages through the C API produce a loadable network") {
  Dir dir;
  remi_experiment_t* exp = nullptr;
  REQUIRE(remi_experiment_parse(kTiny, nullptr, &exp) == REMI_OK);
  REQUIRE(remi_experiment_set(exp, "output_dir", ('"' + dir.path.string() + '"').c_str()) == REMI_OK);

  // Out-of-order stage reports a stage failure, not a config error.
  const int early = remi_experiment_run_stage(exp, "unlearn");
  CHECK(early != REMI_OK);
  CHECK(early != REMI_ERR_CONFIG);

  for (const char* s : {"train", "attack-train", "select-forget", "unlearn", "retrain", "evaluate", "report"})
    REQUIRE_MESSAGE(remi_experiment_run_stage(exp, s) == REMI_OK, s << ": " << remi_last_error());
  CHECK(std::filesystem::exists(dir.path / "report.csv"));
  CHECK(std::filesystem::exists(dir.path / "report.md"));
  char* md = nullptr;
  REQUIRE(remi_experiment_render_report(exp, "markdown", &md) == REMI_OK);
  CHECK(std::string(md).find("Status: complete") != std::string::npos);
  remi_string_free(md);
  char* bad = nullptr;
  CHECK(remi_experiment_render_report(exp, "xml", &bad) == REMI_ERR_CONFIG);

  remi_network_t* net = nullptr;
  REQUIRE(remi_network_load((dir.path / "seed_1" / "target.remi").c_str(), &net) == REMI_OK);
  size_t in = 0, k = 0, params = 0;
  REQUIRE(remi_network_info(net, &in, &k, &params) == REMI_OK);
  CHECK(in == 6);
  CHECK(k == 2);
  CHECK(params == 6 * 16 + 16 + 16 * 2 + 2);
  std::vector<double> x(3 * in, 0.25), probs(3 * k);
  REQUIRE(remi_network_predict(net, x.data(), 3, probs.data(), probs.size()) == REMI_OK);
  for (size_t r = 0; r < 3; ++r) CHECK(probs[r * k] + probs[r * k + 1] == doctest::Approx(1.0));
  CHECK(remi_network_predict(net, x.data(), 3, probs.data(), 2) == REMI_ERR_DIMENSION);
  REQUIRE(remi_network_save(net, (dir.path / "copy.remi").c_str()) == REMI_OK);
  remi_network_free(net);
  CHECK(remi_network_load((dir.path / "report.csv").c_str(), &net) == REMI_ERR_FORMAT);
  CHECK(net == nullptr);

  int complete = 0;
  REQUIRE(remi_experiment_run(exp, &complete) == REMI_OK);
  CHECK(complete == 1);
  remi_experiment_free(exp);
}
