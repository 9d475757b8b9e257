#ifndef FLOWLAB_H
#define FLOWLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlowlabStatus {
  FlowlabStatus_Ok = 0,
  FlowlabStatus_NullPointer = 1,
  FlowlabStatus_InvalidArgument = 2,
  FlowlabStatus_Domain = 3,
  FlowlabStatus_Contract = 4,
  FlowlabStatus_Capability = 5,
  FlowlabStatus_Singular = 6,
  FlowlabStatus_Underflow = 7,
  FlowlabStatus_Parse = 8,
  FlowlabStatus_UnknownScenario = 9,
  FlowlabStatus_Config = 10,
  FlowlabStatus_Io = 11,
  FlowlabStatus_InvalidEstimate = 12,
  FlowlabStatus_Panic = 13,
} FlowlabStatus;

typedef enum FlowlabBackend {
  FlowlabBackend_Euclidean = 0,
  FlowlabBackend_Ricci = 1,
  FlowlabBackend_Gauss = 2,
} FlowlabBackend;

/**
 * Opaque system handle.
 */
typedef struct FlowlabSystem FlowlabSystem;

/**
 * Summary of a Monte Carlo estimate.
 */
typedef struct FlowlabEstimate {
  double value;
  double se;
  double uncertainty;
  double ci_low;
  double ci_high;
  uintptr_t n;
  uintptr_t truncations;
  bool lower_bound_only;
  bool invalid;
} FlowlabEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a handle for a built-in scenario such as `"ou(1)"` or `"sphere(3)"`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FlowlabStatus flowlab_system_new(const char *name, struct FlowlabSystem **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `handle` must come from `flowlab_system_new` and not be used afterwards.
 */
void flowlab_system_free(struct FlowlabSystem *handle);

/**
 * Ambient dimension of the state, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
uintptr_t flowlab_system_dim(const struct FlowlabSystem *handle);

/**
 * Evaluates `H_p(x)(v, v)`; `x` and `v` have `len` entries.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum FlowlabStatus flowlab_eval_hp(const struct FlowlabSystem *handle,
                                   const double *x,
                                   const double *v,
                                   uintptr_t len,
                                   double p,
                                   enum FlowlabBackend backend,
                                   double *out);

/**
 * Certifies every theorem with default sampling; writes a JSON string.
 *
 * # Safety
 * `out` must be a valid pointer; free the result with `flowlab_string_free`.
 */
enum FlowlabStatus flowlab_certify_json(const struct FlowlabSystem *handle, char **out);

/**
 * `sup_x E sup_{s≤t} |T_xF_s|^p` over the `count` points packed in `grid`.
 *
 * # Safety
 * `grid` must hold `count * dim` values and `out` must be valid.
 */
enum FlowlabStatus flowlab_sup_derivative_moment(const struct FlowlabSystem *handle,
                                                 const double *grid,
                                                 uintptr_t count,
                                                 double p,
                                                 double t,
                                                 double dt,
                                                 uintptr_t paths,
                                                 uint64_t seed,
                                                 struct FlowlabEstimate *out);

/**
 * Runs a CLI command (e.g. `"exponent"`) on a TOML configuration and
 * writes the JSON report. A report whose estimates are invalid is still
 * written and the call returns `InvalidEstimate`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be valid.
 */
enum FlowlabStatus flowlab_run_config_json(const char *command,
                                           const char *config_toml,
                                           char **out);

/**
 * Releases a string returned by the library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void flowlab_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *flowlab_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWLAB_H */
