/*
 * Copyright 2026 The negmerge Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/*
 * negmerge C API.
 *
 * Every fallible call returns an nm_status. On failure a description is
 * available from nm_last_error() on the same thread until the next call.
 * Strings handed out by the library are released with nm_string_free().
 * Handles are not thread-safe; use one per thread.
 */

#ifndef NEGMERGE_NEGMERGE_H_
#define NEGMERGE_NEGMERGE_H_

#include <stddef.h>
#include <stdint.h>

#if defined(NM_BUILDING_LIBRARY)
#define NM_API __attribute__((visibility("default")))
#else
#define NM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum nm_status {
  NM_OK = 0,
  NM_ERR_INVALID_ARGUMENT = 1,
  NM_ERR_IO = 2,
  NM_ERR_SCHEMA = 3,
  NM_ERR_SHAPE = 4,
  NM_ERR_CONFIG = 5,
  NM_ERR_PROTOCOL = 6,
  NM_ERR_TIMEOUT = 7,
  NM_ERR_EVALUATOR = 8,
  NM_ERR_UNSUPPORTED = 9,
  NM_ERR_INTERNAL = 10
} nm_status;

typedef enum nm_log_level {
  NM_LOG_DEBUG = 0,
  NM_LOG_INFO = 1,
  NM_LOG_WARN = 2,
  NM_LOG_ERROR = 3
} nm_log_level;

typedef struct nm_session nm_session;
typedef struct nm_adapter nm_adapter;

typedef void (*nm_log_fn)(nm_log_level level, const char* message, void* user);

NM_API const char* nm_version(void);
NM_API const char* nm_last_error(void);
NM_API const char* nm_status_name(nm_status status);
/* Process exit code for a status: 0 ok, 2 user or config error, 1 otherwise. */
NM_API int nm_exit_code(nm_status status);

/* Messages at or above min_level go to fn. Passing NULL restores the default
 * sink (warnings and errors to stderr). */
NM_API void nm_set_log_callback(nm_log_fn fn, void* user, nm_log_level min_level);

/* Sessions bind a run configuration. Adapters and evaluators load lazily on
 * the first command, so overrides must come before that. */
NM_API nm_status nm_session_open(const char* config_path, nm_session** out);
NM_API nm_status nm_session_open_json(const char* config_json, const char* base_dir, nm_session** out);
/* Keys: search.pop, search.generations, search.sigma0, search.max_prune,
 * search.seed, search.parallel, search.subsample, output_dir. */
NM_API nm_status nm_session_set(nm_session* session, const char* key, const char* value);
/* Effective configuration as JSON. */
NM_API nm_status nm_session_config(nm_session* session, char** config_json);
NM_API void nm_session_close(nm_session* session);

/* Commands. On success *report receives a JSON document. */
NM_API nm_status nm_cmd_merge(nm_session* session, const char* mask_path, char** report);
NM_API nm_status nm_cmd_search(nm_session* session, const char* resume_checkpoint, char** report);
/* mode: "leave-one-out", "greedy" or "random". */
NM_API nm_status nm_cmd_inspect(nm_session* session, const char* mode, double sparsity, size_t seeds,
                                char** report);
NM_API nm_status nm_cmd_eval(nm_session* session, const char* delta_path, char** report);
/* spec_json may be NULL for the default testbed. */
NM_API nm_status nm_export_testbed(const char* spec_json, const char* dir, char** report);

NM_API void nm_string_free(char* s);

/* Building blocks. */
NM_API nm_status nm_map_latent(const double* z, size_t n, double k, uint8_t* mask_out);
NM_API nm_status nm_normalized_accuracy(double merged, double expert, double* out);

/* naming_json may be NULL for the canonical layout. */
NM_API nm_status nm_adapter_load(const char* path, const char* naming_json, nm_adapter** out);
/* {"task_name", "num_layers", "rank", "alpha", "shapes": {...}} */
NM_API nm_status nm_adapter_info(const nm_adapter* adapter, char** info_json);
NM_API void nm_adapter_free(nm_adapter* adapter);

#ifdef __cplusplus
}
#endif

#endif /* NEGMERGE_NEGMERGE_H_ */
