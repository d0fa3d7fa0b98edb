#include "remi/remi.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <new>
#include <string>

#include <nlohmann/json.hpp>

#include "remi/error.hpp"
#include "remi/evaluation.hpp"
#include "remi/network.hpp"

struct remi_experiment {
  nlohmann::json doc;
  std::filesystem::path base_dir;
  remi::ExperimentConfig cfg;
  std::string output_dir;
};

struct remi_network {
  remi::Network net;
};

namespace {

thread_local std::string g_last_error;

int record(int code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

template <class F>
int guarded(F&& f) {
  try {
    g_last_error.clear();
    f();
    return REMI_OK;
  } catch (const remi::Error& e) {
    return record(static_cast<int>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return record(REMI_ERR_FORMAT, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return record(REMI_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return record(REMI_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return record(REMI_ERR_INTERNAL, e.what());
  } catch (...) {
    return record(REMI_ERR_INTERNAL, "unknown exception");
  }
}

#define REMI_REQUIRE(ptr)                                                  \
  do {                                                                     \
    if (!(ptr)) return record(REMI_ERR_NULL, #ptr " must not be null");    \
  } while (0)

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void reparse(remi_experiment& e) {
  e.cfg = remi::experiment_from_json(e.doc, e.base_dir);
  e.output_dir = e.cfg.output_dir.string();
}

}  // namespace

extern "C" {

const char* remi_version(void) { return "1.0.0"; }

const char* remi_status_name(int status) {
  switch (status) {
    case REMI_OK: return "ok";
    case REMI_ERR_NULL: return "null argument";
    case REMI_ERR_INTERNAL: return "internal error";
    default:
      if (status >= 1 && status <= 10) return remi::error_code_name(static_cast<remi::ErrorCode>(status));
      return "unknown error";
  }
}

const char* remi_last_error(void) { return g_last_error.c_str(); }

void remi_string_free(char* s) { std::free(s); }

int remi_experiment_load(const char* path, remi_experiment_t** out) {
  REMI_REQUIRE(path);
  REMI_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto e = std::make_unique<remi_experiment>();
    e->doc = remi::read_experiment_document(path);
    e->base_dir = std::filesystem::path(path).parent_path();
    reparse(*e);
    *out = e.release();
  });
}

int remi_experiment_parse(const char* json_text, const char* base_dir, remi_experiment_t** out) {
  REMI_REQUIRE(json_text);
  REMI_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto e = std::make_unique<remi_experiment>();
    try {
      e->doc = nlohmann::json::parse(json_text, nullptr, true, true);
    } catch (const nlohmann::json::exception& ex) {
      remi::fail(remi::ErrorCode::config, std::string("cannot parse experiment: ") + ex.what());
    }
    if (base_dir) e->base_dir = base_dir;
    reparse(*e);
    *out = e.release();
  });
}

int remi_experiment_set(remi_experiment_t* exp, const char* key, const char* value) {
  REMI_REQUIRE(exp);
  REMI_REQUIRE(key);
  REMI_REQUIRE(value);
  return guarded([&] {
    nlohmann::json doc = exp->doc;
    remi::apply_override(doc, key, value);
    remi::ExperimentConfig cfg = remi::experiment_from_json(doc, exp->base_dir);
    exp->doc = std::move(doc);
    exp->cfg = std::move(cfg);
    exp->output_dir = exp->cfg.output_dir.string();
  });
}

int remi_experiment_config(const remi_experiment_t* exp, char** out_json) {
  REMI_REQUIRE(exp);
  REMI_REQUIRE(out_json);
  return guarded([&] { *out_json = dup_string(remi::experiment_to_json(exp->cfg).dump(2)); });
}

const char* remi_experiment_output_dir(const remi_experiment_t* exp) { return exp ? exp->output_dir.c_str() : ""; }

int remi_experiment_run_stage(remi_experiment_t* exp, const char* stage) {
  REMI_REQUIRE(exp);
  REMI_REQUIRE(stage);
  return guarded([&] { remi::run_stage(exp->cfg, remi::parse_stage(stage)); });
}

int remi_experiment_run_stage_seed(remi_experiment_t* exp, const char* stage, uint64_t seed) {
  REMI_REQUIRE(exp);
  REMI_REQUIRE(stage);
  return guarded([&] { remi::run_stage(exp->cfg, remi::parse_stage(stage), seed); });
}

int remi_experiment_run(remi_experiment_t* exp, int* complete) {
  REMI_REQUIRE(exp);
  return guarded([&] {
    const auto report = remi::run_experiment(exp->cfg);
    if (complete) *complete = report.complete() ? 1 : 0;
  });
}

int remi_experiment_render_report(const remi_experiment_t* exp, const char* format, char** out_text) {
  REMI_REQUIRE(exp);
  REMI_REQUIRE(format);
  REMI_REQUIRE(out_text);
  return guarded([&] {
    const auto path = exp->cfg.output_dir / "report.json";
    std::ifstream in(path);
    if (!in) remi::fail(remi::ErrorCode::io, "no report at " + path.string() + "; run evaluate first");
    const auto j = nlohmann::json::parse(in);
    const std::string f = format;
    if (f == "json") {
      *out_text = dup_string(j.dump(2));
      return;
    }
    const auto report = j.get<remi::RunReport>();
    if (f == "csv") *out_text = dup_string(remi::render_report(report, remi::ReportFormat::csv));
    else if (f == "markdown" || f == "md") *out_text = dup_string(remi::render_report(report, remi::ReportFormat::markdown));
    else remi::fail(remi::ErrorCode::config, "unknown report format '" + f + "'");
  });
}

void remi_experiment_free(remi_experiment_t* exp) { delete exp; }

int remi_network_load(const char* path, remi_network_t** out) {
  REMI_REQUIRE(path);
  REMI_REQUIRE(out);
  *out = nullptr;
  return guarded([&] { *out = new remi_network{remi::load_checkpoint(path)}; });
}

int remi_network_save(const remi_network_t* net, const char* path) {
  REMI_REQUIRE(net);
  REMI_REQUIRE(path);
  return guarded([&] { remi::save_checkpoint(net->net, path); });
}

int remi_network_info(const remi_network_t* net, size_t* input_size, size_t* class_count, size_t* param_count) {
  REMI_REQUIRE(net);
  if (input_size) *input_size = net->net.input_size();
  if (class_count) *class_count = net->net.class_count();
  if (param_count) *param_count = net->net.param_count();
  g_last_error.clear();
  return REMI_OK;
}

int remi_network_predict(const remi_network_t* net, const double* x, size_t rows, double* probs, size_t probs_len) {
  REMI_REQUIRE(net);
  REMI_REQUIRE(x);
  REMI_REQUIRE(probs);
  return guarded([&] {
    if (rows == 0) remi::fail(remi::ErrorCode::input, "predict needs at least one row");
    const auto k = net->net.class_count();
    if (probs_len < rows * k)
      remi::fail(remi::ErrorCode::dimension, "output buffer holds " + std::to_string(probs_len) + " values, need " +
                                                 std::to_string(rows * k));
    remi::Shape shape{rows};
    for (auto d : net->net.sample_shape()) shape.push_back(d);
    const std::size_t n = rows * net->net.input_size();
    const remi::Tensor out = net->net.predict(remi::Tensor(shape, std::vector<remi::Real>(x, x + n)));
    std::memcpy(probs, out.data().data(), rows * k * sizeof(double));
  });
}

void remi_network_free(remi_network_t* net) { delete net; }

}  // extern "C"
