#ifndef OOPDBG_H
#define OOPDBG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OopdbgExecStatus {
  OOPDBG_EXEC_STATUS_RUNNING = 0,
  OOPDBG_EXEC_STATUS_SUSPENDED_ON_HALT = 1,
  OOPDBG_EXEC_STATUS_SUSPENDED_ON_STEP = 2,
  OOPDBG_EXEC_STATUS_SUSPENDED_ON_EXCEPTION = 3,
  OOPDBG_EXEC_STATUS_COMPLETED = 4,
  OOPDBG_EXEC_STATUS_FAILED = 5,
} OopdbgExecStatus;

typedef enum OopdbgStatus {
  OOPDBG_STATUS_OK = 0,
  OOPDBG_STATUS_NULL_ARGUMENT = 1,
  OOPDBG_STATUS_INVALID_UTF8 = 2,
  OOPDBG_STATUS_LOAD_FAILED = 3,
  OOPDBG_STATUS_SPAWN_FAILED = 4,
  OOPDBG_STATUS_STEP_FAILED = 5,
  OOPDBG_STATUS_SNAPSHOT_FAILED = 6,
  OOPDBG_STATUS_MALFORMED_BLOB = 7,
  OOPDBG_STATUS_CODE_VERSION_MISMATCH = 8,
  OOPDBG_STATUS_MALFORMED_FRAME = 9,
  OOPDBG_STATUS_OUT_OF_RANGE = 10,
  OOPDBG_STATUS_PANIC = 99,
} OopdbgStatus;

typedef enum OopdbgStep {
  OOPDBG_STEP_INTO = 0,
  OOPDBG_STEP_OVER = 1,
  OOPDBG_STEP_THROUGH = 2,
  OOPDBG_STEP_PROCEED = 3,
} OopdbgStep;

// Serialized session bytes.
typedef struct OopdbgBlob OopdbgBlob;

// An execution of a guest program.
typedef struct OopdbgExecution OopdbgExecution;

// A loaded guest program.
typedef struct OopdbgImage OopdbgImage;

typedef struct OopdbgBlobStats {
  uint32_t object_count;
  uint32_t frame_count;
  uint32_t proxy_count;
  uint64_t byte_size;
} OopdbgBlobStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread; empty after a
// success. Valid until the next call on the same thread.
const char *oopdbg_last_error(void);

// Compiles guest source into an image.
//
// # Safety
// `source` must be a NUL-terminated string; `out` must be writable.
enum OopdbgStatus oopdbg_image_load(const char *source, struct OopdbgImage **out);

// Writes the 32-byte code hash of the image to `hash_out`.
//
// # Safety
// `image` must come from [`oopdbg_image_load`]; `hash_out` must have room
// for 32 bytes.
enum OopdbgStatus oopdbg_image_hash(const struct OopdbgImage *image, uint8_t *hash_out);

// # Safety
// `image` must be null or come from [`oopdbg_image_load`], and not be used
// afterwards.
void oopdbg_image_free(struct OopdbgImage *image);

// Starts an execution sending `selector` to a new instance of `class` with
// integer arguments. Nothing runs until [`oopdbg_execution_run`].
//
// # Safety
// `image` must be valid; `class` and `selector` NUL-terminated; `args`
// must point to `nargs` integers (or be null when `nargs` is 0).
enum OopdbgStatus oopdbg_execution_spawn(const struct OopdbgImage *image,
                                         const char *class_,
                                         const char *selector,
                                         const int64_t *args,
                                         size_t nargs,
                                         struct OopdbgExecution **out);

// Runs until the execution suspends, completes or fails. A `fuel` of 0
// means no instruction limit. Guest file primitives are unavailable.
//
// # Safety
// Both handles must be valid and the execution must belong to the image.
enum OopdbgStatus oopdbg_execution_run(const struct OopdbgImage *image,
                                       struct OopdbgExecution *exec,
                                       uint64_t fuel,
                                       enum OopdbgExecStatus *status_out);

// Applies one debugger step to a suspended execution.
//
// # Safety
// As for [`oopdbg_execution_run`].
enum OopdbgStatus oopdbg_execution_step(const struct OopdbgImage *image,
                                        struct OopdbgExecution *exec,
                                        enum OopdbgStep step,
                                        enum OopdbgExecStatus *status_out);

// Restarts frame `frame` (0 is the top) from its first instruction.
//
// # Safety
// As for [`oopdbg_execution_run`].
enum OopdbgStatus oopdbg_execution_restart(const struct OopdbgImage *image,
                                           struct OopdbgExecution *exec,
                                           size_t frame,
                                           enum OopdbgExecStatus *status_out);

// # Safety
// `exec` must be valid; `status_out` and `depth_out` may be null.
enum OopdbgStatus oopdbg_execution_info(const struct OopdbgExecution *exec,
                                        enum OopdbgExecStatus *status_out,
                                        size_t *depth_out);

// Method name of frame `frame` (0 is the top), as `Class>>selector`.
//
// # Safety
// `exec` must be valid; `buf` must hold `cap` bytes or be null.
enum OopdbgStatus oopdbg_execution_frame_method(const struct OopdbgExecution *exec,
                                                size_t frame,
                                                char *buf,
                                                size_t cap,
                                                size_t *len_out);

// The pending exception as `Class: message`, or an empty string.
//
// # Safety
// As for [`oopdbg_execution_frame_method`].
enum OopdbgStatus oopdbg_execution_exception(const struct OopdbgExecution *exec,
                                             char *buf,
                                             size_t cap,
                                             size_t *len_out);

// The result of a completed execution, rendered; empty if none.
//
// # Safety
// As for [`oopdbg_execution_frame_method`].
enum OopdbgStatus oopdbg_execution_result(const struct OopdbgExecution *exec,
                                          char *buf,
                                          size_t cap,
                                          size_t *len_out);

// # Safety
// `exec` must be null or a handle not used afterwards.
void oopdbg_execution_free(struct OopdbgExecution *exec);

// Serializes a suspended execution into a session blob. Objects holding
// external resources make this fail, since no substitution rules apply.
//
// # Safety
// Both handles must be valid; `out` must be writable.
enum OopdbgStatus oopdbg_snapshot(const struct OopdbgImage *image,
                                  const struct OopdbgExecution *exec,
                                  uint64_t session_id,
                                  uint64_t monitor_id,
                                  struct OopdbgBlob **out);

// Borrows the blob's bytes; valid until the blob is freed.
//
// # Safety
// `blob` must be valid; `data_out` and `len_out` must be writable.
enum OopdbgStatus oopdbg_blob_bytes(const struct OopdbgBlob *blob,
                                    const uint8_t **data_out,
                                    size_t *len_out);

// # Safety
// `blob` must be null or a handle not used afterwards.
void oopdbg_blob_free(struct OopdbgBlob *blob);

// Reads counts from a session blob without rebuilding it.
//
// # Safety
// `data` must point to `len` readable bytes; `stats_out` must be writable.
enum OopdbgStatus oopdbg_blob_stats(const uint8_t *data,
                                    size_t len,
                                    struct OopdbgBlobStats *stats_out);

// Rebuilds an execution from a session blob against `image`, whose hash
// must match. Proxies become inert objects.
//
// # Safety
// `image` must be valid; `data` must point to `len` readable bytes; `out`
// must be writable.
enum OopdbgStatus oopdbg_materialize(const struct OopdbgImage *image,
                                     const uint8_t *data,
                                     size_t len,
                                     struct OopdbgExecution **out);

// Decodes the first wire frame in `data`, reporting its tag and total
// length. Returns `MalformedFrame` for truncated or invalid input.
//
// # Safety
// `data` must point to `len` readable bytes; the outputs may be null.
enum OopdbgStatus oopdbg_wire_peek(const uint8_t *data,
                                   size_t len,
                                   uint8_t *tag_out,
                                   size_t *frame_len_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OOPDBG_H */
