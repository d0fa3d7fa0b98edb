#ifndef REMI_REMI_H
#define REMI_REMI_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define REMI_API __declspec(dllexport)
#else
#define REMI_API __attribute__((visibility("default")))
#endif

/* Status codes. Values 1..10 match remi::ErrorCode. */
typedef enum remi_status {
  REMI_OK = 0,
  REMI_ERR_INPUT = 1,
  REMI_ERR_DIMENSION = 2,
  REMI_ERR_NUMERIC = 3,
  REMI_ERR_STATE = 4,
  REMI_ERR_IO = 5,
  REMI_ERR_FORMAT = 6,
  REMI_ERR_ACCESS = 7,
  REMI_ERR_TRAINING = 8,
  REMI_ERR_STALL = 9,
  REMI_ERR_CONFIG = 10,
  REMI_ERR_NULL = 11,
  REMI_ERR_INTERNAL = 99
} remi_status;

typedef struct remi_experiment remi_experiment_t;
typedef struct remi_network remi_network_t;

REMI_API const char* remi_version(void);
REMI_API const char* remi_status_name(int status);
/* Message of the last failed call on this thread; "" if none. */
REMI_API const char* remi_last_error(void);
REMI_API void remi_string_free(char* s);

/* Experiments. Relative corpus paths resolve against the file's directory. */
REMI_API int remi_experiment_load(const char* path, remi_experiment_t** out);
REMI_API int remi_experiment_parse(const char* json_text, const char* base_dir, remi_experiment_t** out);
/* Overrides one field by dotted key, e.g. ("unlearn.learning_rate", "0.05").
   The value is parsed as JSON, falling back to a plain string. */
REMI_API int remi_experiment_set(remi_experiment_t* exp, const char* key, const char* value);
/* Effective configuration as JSON; release with remi_string_free. */
REMI_API int remi_experiment_config(const remi_experiment_t* exp, char** out_json);
/* Pointer owned by the handle, valid until the next call on it. */
REMI_API const char* remi_experiment_output_dir(const remi_experiment_t* exp);
/* stage: train, attack-train, select-forget, unlearn, retrain, evaluate, report. */
REMI_API int remi_experiment_run_stage(remi_experiment_t* exp, const char* stage);
REMI_API int remi_experiment_run_stage_seed(remi_experiment_t* exp, const char* stage, uint64_t seed);
/* Every stage for every seed; *complete is 0 if any stage failed. */
REMI_API int remi_experiment_run(remi_experiment_t* exp, int* complete);
/* Renders output_dir/report.json; format: "csv", "markdown" or "json". */
REMI_API int remi_experiment_render_report(const remi_experiment_t* exp, const char* format, char** out_text);
REMI_API void remi_experiment_free(remi_experiment_t* exp);

/* Networks (checkpoint files). */
REMI_API int remi_network_load(const char* path, remi_network_t** out);
REMI_API int remi_network_save(const remi_network_t* net, const char* path);
REMI_API int remi_network_info(const remi_network_t* net, size_t* input_size, size_t* class_count, size_t* param_count);
/* x: rows * input_size values; probs: rows * class_count values. */
REMI_API int remi_network_predict(const remi_network_t* net, const double* x, size_t rows, double* probs, size_t probs_len);
REMI_API void remi_network_free(remi_network_t* net);

#ifdef __cplusplus
}
#endif

#endif
