/* C interface to the fbm-tanaka library. Generated by cbindgen; do not edit. */

#ifndef FBM_TANAKA_H
#define FBM_TANAKA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Model selector for the one-shot entry points. `nu` is read only for
 * `Fou`; `Doss` is the built-in sine model `sigma(x) = 2 + sin x`.
 */
typedef enum FtModelKind {
  FT_MODEL_KIND_FBM = 0,
  FT_MODEL_KIND_FOU = 1,
  FT_MODEL_KIND_DOSS = 2,
} FtModelKind;

/**
 * Status code of every fallible call. Zero means success.
 */
typedef enum FtStatus {
  FT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FT_STATUS_NULL_POINTER = 1,
  /**
   * An argument failed validation (Hurst range, grid shape, buffer
   * length, unknown enum value, ...).
   */
  FT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The computation failed numerically (embedding spectrum, solver
   * divergence, root bracketing).
   */
  FT_STATUS_NUMERICAL = 3,
  /**
   * A panic was caught at the boundary.
   */
  FT_STATUS_PANIC = 4,
} FtStatus;

/**
 * Opaque fBm sampler over a fixed grid, Hurst parameter, and seed. Paths
 * are addressed by index: equal `(seed, path_index)` always reproduces
 * the same values, at any thread count.
 */
typedef struct FtSampler FtSampler;

/**
 * Terms of the decomposition of `|X_t - x|` for one path, one level, one
 * mollifier index, one argument convention. Field meanings match the
 * library's term table: `skorokhod = rs_total - trace_sigma_prime -
 * trace_local`, `residual_tchange` is the smoothed-identity residual
 * (pure discretization error), and `residual_tf` is the sign-formula
 * residual (it estimates the Skorokhod integral).
 */
typedef struct FtTanakaTerms {
  double abs_increment;
  double drift;
  double drift_sgn;
  double rs_total;
  double trace_sigma_prime;
  double trace_sigma_prime_sgn;
  double trace_local;
  double skorokhod;
  double residual_tchange;
  double residual_tf;
} FtTanakaTerms;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, NUL-terminated.
 * Never null; empty before the first failure. Valid until the next
 * failing call on the same thread.
 */
const char *ft_last_error_message(void);

/**
 * Creates a sampler for fBm on `[0, horizon]` with `steps` uniform steps.
 * On success writes the new handle to `out`.
 *
 * # Safety
 *
 * `out` must be null or valid for writing one pointer.
 */
enum FtStatus ft_sampler_new(double hurst,
                             double horizon,
                             uintptr_t steps,
                             uint64_t seed,
                             struct FtSampler **out);

/**
 * Releases a sampler handle. Null is ignored.
 *
 * # Safety
 *
 * `sampler` must be null or a handle from [`ft_sampler_new`] that has not
 * been freed yet.
 */
void ft_sampler_free(struct FtSampler *sampler);

/**
 * Number of values per sampled path (`steps + 1` grid nodes, including
 * `t = 0`). Returns 0 for a null handle.
 *
 * # Safety
 *
 * `sampler` must be null or a live handle from [`ft_sampler_new`].
 */
uintptr_t ft_sampler_path_len(const struct FtSampler *sampler);

/**
 * Samples the path with the given index into `out_values`, which must
 * hold exactly `ft_sampler_path_len` values.
 *
 * # Safety
 *
 * `sampler` must be null or a live handle from [`ft_sampler_new`], and
 * `out_values` must be null or valid for writing `len` doubles.
 */
enum FtStatus ft_sampler_sample(const struct FtSampler *sampler,
                                uint64_t path_index,
                                double *out_values,
                                uintptr_t len);

/**
 * One-shot decomposition: samples the driver path `(seed, path_index)`,
 * solves the model from `x0`, and fills `out` with every term at the
 * given level and mollifier index. `argument_at_r` selects the trace
 * convention (false: argument at `s`; true: argument at `r`).
 *
 * # Safety
 *
 * `out` must be null or valid for writing one [`FtTanakaTerms`].
 */
enum FtStatus ft_tanaka_terms(enum FtModelKind model,
                              double nu,
                              double hurst,
                              double horizon,
                              uintptr_t steps,
                              uint64_t seed,
                              uint64_t path_index,
                              double x0,
                              double level,
                              uint64_t mollifier_n,
                              bool argument_at_r,
                              struct FtTanakaTerms *out);

/**
 * Weighted local time of one fBm path at `level`:
 * `2H sum_i rho_{1/n}(B_{t_i} - level) t_i^{2H-1} dt`.
 *
 * # Safety
 *
 * `out` must be null or valid for writing one double.
 */
enum FtStatus ft_weighted_local_time(double hurst,
                                     double horizon,
                                     uintptr_t steps,
                                     uint64_t seed,
                                     uint64_t path_index,
                                     double level,
                                     uint64_t mollifier_n,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBM_TANAKA_H */
