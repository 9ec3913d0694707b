#ifndef SLUICE_H
#define SLUICE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum SluiceStatus {
  SLUICE_STATUS_OK = 0,
  SLUICE_STATUS_NULL_ARGUMENT = 1,
  SLUICE_STATUS_INVALID_UTF8 = 2,
  SLUICE_STATUS_INVALID_PIPELINE = 3,
  SLUICE_STATUS_INVALID_CONFIG = 4,
  SLUICE_STATUS_EXECUTION = 5,
  SLUICE_STATUS_JOB_FAILED = 6,
  SLUICE_STATUS_NOT_FOUND = 7,
  SLUICE_STATUS_PANIC = 8,
} SluiceStatus;

// A compiled pipeline.
typedef struct SluicePipeline SluicePipeline;

// A simulated runtime with its own object store.
typedef struct SluiceRuntime SluiceRuntime;

// Bytes owned by the library; release with [`sluice_buffer_free`].
typedef struct SluiceBuffer {
  uint8_t *data;
  size_t len;
} SluiceBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a
// success. Valid until the next call on this thread.
const char *sluice_last_error(void);

// Compiles a pipeline document (JSON, NUL-terminated).
//
// # Safety
// `json` must be a valid C string and `out` a valid pointer.
enum SluiceStatus sluice_pipeline_compile(const char *json, struct SluicePipeline **out);

// Loads one of the shipped pipelines by name, e.g. "compression".
//
// # Safety
// `name` must be a valid C string and `out` a valid pointer.
enum SluiceStatus sluice_pipeline_from_catalog(const char *name, struct SluicePipeline **out);

// Canonical JSON of the compiled pipeline, owned by the handle.
//
// # Safety
// `pipeline` must be a live handle or null.
const char *sluice_pipeline_json(const struct SluicePipeline *pipeline);

// Number of stages, or 0 for a null handle.
//
// # Safety
// `pipeline` must be a live handle or null.
size_t sluice_pipeline_stage_count(const struct SluicePipeline *pipeline);

// # Safety
// `pipeline` must come from this library and not be used afterwards.
void sluice_pipeline_free(struct SluicePipeline *pipeline);

// Runs the pipeline in-process over `input` and returns its final outputs
// concatenated.
//
// # Safety
// `input` must point to `len` readable bytes (or be null with `len` 0) and
// `out` must be a valid pointer.
enum SluiceStatus sluice_run_local(const struct SluicePipeline *pipeline,
                                   const uint8_t *input,
                                   size_t len,
                                   struct SluiceBuffer *out);

// # Safety
// `buf` must come from this library and not be freed twice.
void sluice_buffer_free(struct SluiceBuffer buf);

// # Safety
// `s` must come from this library and not be freed twice.
void sluice_string_free(char *s);

// Creates a runtime with an in-memory store. `config_json` is a run
// configuration document or null for defaults.
//
// # Safety
// `config_json` must be a valid C string or null; `out` a valid pointer.
enum SluiceStatus sluice_runtime_new(const char *config_json, struct SluiceRuntime **out);

// # Safety
// `rt` must come from this library and not be used afterwards.
void sluice_runtime_free(struct SluiceRuntime *rt);

// Stores an object at the current virtual time.
//
// # Safety
// `rt` must be a live handle, `key` a valid C string and `data` point to
// `len` readable bytes.
enum SluiceStatus sluice_runtime_put(struct SluiceRuntime *rt,
                                     const char *key,
                                     const uint8_t *data,
                                     size_t len);

// Submits a job over the object at `input_key`. The job id is returned in
// `job_id`; free it with [`sluice_string_free`].
//
// # Safety
// Handles must be live, `input_key` a valid C string and `job_id` a valid
// pointer.
enum SluiceStatus sluice_runtime_submit(struct SluiceRuntime *rt,
                                        const struct SluicePipeline *pipeline,
                                        const char *input_key,
                                        char **job_id);

// Runs the simulation until no work remains.
//
// # Safety
// `rt` must be a live handle.
enum SluiceStatus sluice_runtime_run(struct SluiceRuntime *rt);

// Current virtual time in milliseconds, or 0 for a null handle.
//
// # Safety
// `rt` must be a live handle or null.
uint64_t sluice_runtime_now_ms(const struct SluiceRuntime *rt);

// Job summary as canonical JSON; free with [`sluice_string_free`].
//
// # Safety
// `rt` must be a live handle, `job` a valid C string and `out` a valid
// pointer.
enum SluiceStatus sluice_job_summary_json(const struct SluiceRuntime *rt,
                                          const char *job,
                                          char **out);

// Final outputs of a finished job, concatenated in output order. Returns
// `JobFailed` if the job did not finish.
//
// # Safety
// `rt` must be a live handle, `job` a valid C string and `out` a valid
// pointer.
enum SluiceStatus sluice_job_output(const struct SluiceRuntime *rt,
                                    const char *job,
                                    struct SluiceBuffer *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLUICE_H */
