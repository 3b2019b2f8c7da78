#ifndef INTERPOLANT_LAB_H
#define INTERPOLANT_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum IlStatus {
  IL_STATUS_OK = 0,
  IL_STATUS_NULL_POINTER = 1,
  IL_STATUS_INVALID_ARGUMENT = 2,
  IL_STATUS_DOMAIN = 3,
  IL_STATUS_ORACLE = 4,
  IL_STATUS_CONTRACT = 5,
  IL_STATUS_NUMERICAL = 6,
  IL_STATUS_IO = 7,
  IL_STATUS_PANIC = 8,
} IlStatus;

// Integration methods for [`il_drift_integrate`].
typedef enum IlMethod {
  IL_METHOD_EULER = 0,
  IL_METHOD_HEUN = 1,
  IL_METHOD_RK4 = 2,
} IlMethod;

// Opaque drift field `b_t(x)`.
typedef struct IlDrift IlDrift;

// Opaque interpolation schedule.
typedef struct IlSchedule IlSchedule;

// Schedule values at one time.
typedef struct IlScheduleState {
  double alpha;
  double beta;
  double alpha_dot;
  double beta_dot;
  // Optimal diffusion coefficient `alpha^2 (beta_dot/beta - alpha_dot/alpha)`.
  double epsilon;
} IlScheduleState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next call into the library from the same thread.
const char *il_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *il_version(void);

// Creates a schedule from a description such as `"trig"`,
// `"designed-gaussian:0.01"` or `"dilated:1:5"`.
//
// # Safety
// `spec` must be a NUL-terminated string and `out` a writable pointer.
enum IlStatus il_schedule_new(const char *spec, struct IlSchedule **out);

// Solves for the schedule minimizing the averaged Lipschitz objective of a
// 1D Gaussian target of the given variance, tabulated on `grid` nodes.
//
// # Safety
// `out` must be a writable pointer.
enum IlStatus il_schedule_optimized_gaussian(double variance,
                                             uint32_t k,
                                             size_t grid,
                                             struct IlSchedule **out);

// Releases a schedule. NULL is ignored.
//
// # Safety
// `schedule` must come from this library and not be used afterwards.
void il_schedule_free(struct IlSchedule *schedule);

// Evaluates the schedule at `t` in `[0, 1]`.
//
// # Safety
// Pointers must be valid.
enum IlStatus il_schedule_eval(const struct IlSchedule *schedule,
                               double t,
                               struct IlScheduleState *out);

// Closed-form drift of a Gaussian target with the given covariance
// eigenvalues (coordinate basis).
//
// # Safety
// `eigenvalues` must hold `d` values; `out` must be writable.
enum IlStatus il_drift_gaussian(const struct IlSchedule *schedule,
                                const double *eigenvalues,
                                size_t d,
                                struct IlDrift **out);

// Closed-form drift of `p N(r, I) + (1 - p) N(-r, I)` under a
// variance-preserving schedule.
//
// # Safety
// `r` must hold `d` values; `out` must be writable.
enum IlStatus il_drift_bimodal(const struct IlSchedule *schedule,
                               const double *r,
                               size_t d,
                               double p,
                               struct IlDrift **out);

// Converts a drift learned under the linear schedule into the drift of
// `schedule`. `reference` stays owned by the caller.
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum IlStatus il_drift_transfer(const struct IlDrift *reference,
                                const struct IlSchedule *schedule,
                                struct IlDrift **out);

// Releases a drift. NULL is ignored.
//
// # Safety
// `drift` must come from this library and not be used afterwards.
void il_drift_free(struct IlDrift *drift);

// State dimension of the drift, 0 for NULL.
//
// # Safety
// `drift` must be valid or NULL.
size_t il_drift_dim(const struct IlDrift *drift);

// Writes `b_t(x)` into `out`; `x` and `out` hold `d` values each.
//
// # Safety
// Pointers must be valid for `d` values.
enum IlStatus il_drift_eval(const struct IlDrift *drift,
                            double t,
                            const double *x,
                            size_t d,
                            double *out);

// Spectral norm of the drift Jacobian at `(t, x)`.
//
// # Safety
// `x` must hold `d` values; `out` must be writable.
enum IlStatus il_drift_jacobian_norm(const struct IlDrift *drift,
                                     double t,
                                     const double *x,
                                     size_t d,
                                     double *out);

// Integrates `n` row-major states of dimension `d` in place from `t_min`
// to `t_max` with `steps` fixed steps.
//
// # Safety
// `states` must hold `n * d` values.
enum IlStatus il_drift_integrate(const struct IlDrift *drift,
                                 enum IlMethod method,
                                 size_t steps,
                                 double t_min,
                                 double t_max,
                                 double *states,
                                 size_t n,
                                 size_t d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INTERPOLANT_LAB_H */
