#ifndef DISTCOMP_H
#define DISTCOMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_INPUT = 2,
  DC_STATUS_SINGULAR_MATRIX = 3,
  DC_STATUS_NUMERICAL = 4,
  DC_STATUS_PRECONDITION = 5,
  DC_STATUS_CONFIG = 6,
  DC_STATUS_IO = 7,
  DC_STATUS_SCHEMA = 8,
  /**
   * A bug inside the library; the message holds the panic text.
   */
  DC_STATUS_INTERNAL = 9,
} DcStatus;

/**
 * LMMSE estimators for every stage of one policy on one system.
 */
typedef struct DcEstimator DcEstimator;

typedef struct DcNetwork DcNetwork;

/**
 * Per-agent compression matrices.
 */
typedef struct DcPolicy DcPolicy;

/**
 * Channels, source statistics and noise level of one realization.
 */
typedef struct DcSystem DcSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t dc_last_error(char *buf, uintptr_t len);

/**
 * Signaling cost with global CSI.
 *
 * # Safety
 * `out_total` must be valid for a write.
 */
enum DcStatus dc_cost_global(uint64_t m, uint64_t n, uint64_t k, uint64_t t, uint64_t *out_total);

/**
 * Signaling cost with local CSI.
 *
 * # Safety
 * `out_total` must be valid for a write.
 */
enum DcStatus dc_cost_local(uint64_t n, uint64_t k, uint64_t t, uint64_t *out_total);

/**
 * Midrise quantization of `v` to `bits` bits over `[-range, range]`.
 *
 * # Safety
 * `out_index` and `out_value` must each be null or valid for a write.
 */
enum DcStatus dc_quantize(uint32_t bits,
                          double range,
                          double v,
                          uint64_t *out_index,
                          double *out_value);

/**
 * Creates a system from `agents` channel matrices of `m x n` each, stored
 * one after another, row-major.
 *
 * # Safety
 * `channels` must hold `agents * m * n` doubles; `out` must be valid for a write.
 */
enum DcStatus dc_system_new(const double *channels,
                            uintptr_t agents,
                            uintptr_t m,
                            uintptr_t n,
                            double rho,
                            double sigma2,
                            struct DcSystem **out);

/**
 * # Safety
 * `system` must be null or a handle from `dc_system_new` not yet freed.
 */
void dc_system_free(struct DcSystem *system);

/**
 * Local eigenvector policy with `k_max` rows per agent.
 *
 * # Safety
 * `system` must be a live handle; `out` must be valid for a write.
 */
enum DcStatus dc_policy_evd(const struct DcSystem *system, uintptr_t k_max, struct DcPolicy **out);

/**
 * Block coordinate descent policy for exactly `k` rows per agent.
 *
 * # Safety
 * `system` must be a live handle; `out` must be valid for a write.
 */
enum DcStatus dc_policy_bcd(const struct DcSystem *system, uintptr_t k, struct DcPolicy **out);

/**
 * Rows per agent.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be valid for a write.
 */
enum DcStatus dc_policy_k_max(const struct DcPolicy *policy, uintptr_t *out);

/**
 * The first `k` compressed values `W_agent[k] y` of observation `y`
 * (length `m`), unquantized.
 *
 * # Safety
 * `y` must hold `m` doubles and `out` room for `k`.
 */
enum DcStatus dc_policy_compress(const struct DcPolicy *policy,
                                 uintptr_t agent,
                                 uintptr_t k,
                                 const double *y,
                                 double *out);

/**
 * # Safety
 * `policy` must be null or a live handle.
 */
void dc_policy_free(struct DcPolicy *policy);

/**
 * Loads a network checkpoint manifest written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid for a write.
 */
enum DcStatus dc_network_load(const char *path, struct DcNetwork **out);

/**
 * Runs the network on the system's channels and returns the resulting
 * policy with its dynamic ranges.
 *
 * # Safety
 * `network` and `system` must be live handles; `out` must be valid for a write.
 */
enum DcStatus dc_network_policy(const struct DcNetwork *network,
                                const struct DcSystem *system,
                                struct DcPolicy **out);

/**
 * # Safety
 * `network` must be null or a live handle.
 */
void dc_network_free(struct DcNetwork *network);

/**
 * # Safety
 * `system` and `policy` must be live handles; `out` must be valid for a write.
 */
enum DcStatus dc_estimator_new(const struct DcSystem *system,
                               const struct DcPolicy *policy,
                               struct DcEstimator **out);

/**
 * Source estimate from the first `k` values of every agent, stacked
 * agent-major (`agents * k` doubles). Writes `n` doubles.
 *
 * # Safety
 * `received` must hold `agents * k` doubles and `out` room for `n`.
 */
enum DcStatus dc_estimator_estimate(const struct DcEstimator *est,
                                    uintptr_t k,
                                    const double *received,
                                    double *out);

/**
 * Unquantized MSE of stage `k`.
 *
 * # Safety
 * `est` must be a live handle; `out` must be valid for a write.
 */
enum DcStatus dc_estimator_mse(const struct DcEstimator *est, uintptr_t k, double *out);

/**
 * # Safety
 * `est` must be null or a live handle.
 */
void dc_estimator_free(struct DcEstimator *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISTCOMP_H */
