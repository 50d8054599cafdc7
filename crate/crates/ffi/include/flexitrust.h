#ifndef FLEXITRUST_H
#define FLEXITRUST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  FT_STATUS_OK = 0,
  FT_STATUS_NULL_ARGUMENT = 1,
  FT_STATUS_INVALID_UTF8 = 2,
  FT_STATUS_UNKNOWN_PROTOCOL = 3,
  FT_STATUS_UNKNOWN_SCENARIO = 4,
  FT_STATUS_INVALID_CONFIG = 5,
  FT_STATUS_BUFFER_TOO_SMALL = 6,
  FT_STATUS_DECODE = 7,
  FT_STATUS_BAD_FILTER = 8,
  FT_STATUS_PANIC = 9,
} FtStatus;

/**
 * A finished run. Opaque to C.
 */
typedef struct FtRun FtRun;

/**
 * Knobs for one scenario run. Start from `ft_params_default`.
 */
typedef struct {
  uint32_t f;
  uint64_t seed;
  /**
   * Nonzero for components that forget on rollback.
   */
  uint8_t volatile_components;
  uint32_t clients;
  uint64_t txns;
  uint32_t batch_size;
  uint64_t access_latency_us;
  uint64_t one_way_us;
  uint64_t jitter_us;
  uint32_t pipeline_width;
} FtParams;

/**
 * Summary flags and counters of a finished run.
 */
typedef struct {
  uint8_t safety_ok;
  uint8_t rsm_liveness_ok;
  uint8_t consensus_liveness_ok;
  uint8_t aborted;
  uint32_t violations;
  uint64_t completed_txns;
  uint64_t view_changes;
  double tps;
  double mean_latency_us;
} FtSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *ft_last_error(void);

FtParams ft_params_default(void);

/**
 * Runs `scenario` (for example "rollback_attack") on `protocol` (for
 * example "MinBft") and stores the handle in `*out`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `params` and `out` must be valid.
 */
FtStatus ft_run_scenario(const char *scenario,
                         const char *protocol,
                         const FtParams *params,
                         FtRun **out);

/**
 * # Safety
 * `run` must come from `ft_run_scenario` and not be used afterwards.
 */
void ft_run_free(FtRun *run);

/**
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
FtStatus ft_run_summary(const FtRun *run, FtSummary *out);

/**
 * Verdict as JSON lines (UTF-8, not NUL-terminated).
 *
 * # Safety
 * `run` must be live; `buf` must hold `cap` bytes or be null.
 */
FtStatus ft_run_verdict_json(const FtRun *run, uint8_t *buf, size_t cap, size_t *needed);

/**
 * The binary trace of the run.
 *
 * # Safety
 * As for `ft_run_verdict_json`.
 */
FtStatus ft_run_trace(const FtRun *run, uint8_t *buf, size_t cap, size_t *needed);

/**
 * Renders a binary trace. `filter` is null or a comma-separated list of
 * `key=value` clauses over replica, seq and kind.
 *
 * # Safety
 * `trace` must hold `len` bytes; `filter` null or NUL-terminated.
 */
FtStatus ft_trace_explain(const uint8_t *trace,
                          size_t len,
                          const char *filter,
                          uint8_t *buf,
                          size_t cap,
                          size_t *needed);

/**
 * Analytic throughput bound in transactions per second.
 *
 * # Safety
 * `protocol` NUL-terminated; `out` writable.
 */
FtStatus ft_throughput_model(const char *protocol,
                             uint32_t batch,
                             uint64_t rtt_us,
                             uint64_t access_latency_us,
                             uint32_t pipeline_width,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLEXITRUST_H */
