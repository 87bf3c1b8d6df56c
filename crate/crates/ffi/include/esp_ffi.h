#ifndef ESP_FFI_H
#define ESP_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum EspStatus {
  ESP_STATUS_OK = 0,
  ESP_STATUS_NULL_POINTER = 1,
  ESP_STATUS_INVALID_ARGUMENT = 2,
  ESP_STATUS_CONFIG = 3,
  ESP_STATUS_NUMERICAL = 4,
  ESP_STATUS_CHECKPOINT = 5,
  ESP_STATUS_IO = 6,
  ESP_STATUS_UNSUPPORTED = 7,
  ESP_STATUS_NON_CONVERGENCE = 8,
  ESP_STATUS_BUFFER_TOO_SMALL = 9,
  /**
   * The checks ran and at least one failed.
   */
  ESP_STATUS_CHECK_FAILED = 10,
  ESP_STATUS_PANIC = 99,
} EspStatus;

/**
 * An environment together with its current episode state.
 */
typedef struct EspEnv EspEnv;

/**
 * A finite planar symmetry group.
 */
typedef struct EspGroup EspGroup;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *esp_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *esp_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void esp_string_free(char *s);

/**
 * Creates an environment by name (`coop_nav`, `predator_prey`,
 * `formation_change`); `n_agents == 0` selects the default size.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum EspStatus esp_env_new(const char *name, size_t n_agents, struct EspEnv **out);

/**
 * # Safety
 * `env` must come from [`esp_env_new`] (or be NULL) and not be used afterwards.
 */
void esp_env_free(struct EspEnv *env);

/**
 * Sizes of an environment: agents, per-agent observation length, global
 * state length, and action width (1 for discrete, 2 for continuous).
 *
 * # Safety
 * Pointers must be valid; any output pointer may be NULL to skip it.
 */
enum EspStatus esp_env_dims(const struct EspEnv *env,
                            size_t *n_agents,
                            size_t *obs_dim,
                            size_t *global_dim,
                            size_t *action_width);

/**
 * Starts a new episode from `seed`.
 *
 * # Safety
 * `env` must be a live handle.
 */
enum EspStatus esp_env_reset(struct EspEnv *env, uint64_t seed);

/**
 * Copies the global state into `buf` (length `len` ≥ global dim).
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum EspStatus esp_env_global_state(const struct EspEnv *env, double *buf, size_t len);

/**
 * Copies agent `agent`'s observation into `buf`.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum EspStatus esp_env_observation(const struct EspEnv *env, size_t agent, double *buf, size_t len);

/**
 * Advances one step. `actions` holds one value per agent for discrete
 * environments (the action index) or two per agent for continuous ones.
 *
 * # Safety
 * `actions` must hold `len` doubles; `reward` and `done` must be writable
 * (or NULL to skip).
 */
enum EspStatus esp_env_step(struct EspEnv *env,
                            const double *actions,
                            size_t len,
                            double *reward,
                            bool *done);

/**
 * Measures reward invariance and transition equivariance of `env` under
 * `group` over `samples` reachable pairs. Returns `ESP_STATUS_CHECK_FAILED`
 * when either exceeds its tolerance; the deviations are written either way.
 *
 * # Safety
 * `group` must be NUL-terminated; outputs may be NULL.
 */
enum EspStatus esp_env_check_symmetry(const struct EspEnv *env,
                                      const char *group,
                                      size_t samples,
                                      uint64_t seed,
                                      double *reward_deviation,
                                      double *transition_deviation);

/**
 * Builds a group by name (`c<n>` or `d<n>`).
 *
 * # Safety
 * `name` must be NUL-terminated; `out` must be writable.
 */
enum EspStatus esp_group_new(const char *name, struct EspGroup **out);

/**
 * # Safety
 * `group` must come from [`esp_group_new`] (or be NULL) and not be used afterwards.
 */
void esp_group_free(struct EspGroup *group);

/**
 * Number of elements, or 0 for a NULL handle.
 *
 * # Safety
 * `group` must be a live handle or NULL.
 */
size_t esp_group_order(const struct EspGroup *group);

/**
 * `out = g_element · v` for a planar vector.
 *
 * # Safety
 * `v` and `out` must each point to two doubles.
 */
enum EspStatus esp_group_apply(const struct EspGroup *group,
                               size_t element,
                               const double *v,
                               double *out);

/**
 * Index of `a ∘ b`.
 *
 * # Safety
 * `out` must be writable.
 */
enum EspStatus esp_group_compose(const struct EspGroup *group, size_t a, size_t b, size_t *out);

/**
 * Checks closure, identity, inverse and associativity.
 * `ESP_STATUS_CHECK_FAILED` carries the counterexample in the error message.
 *
 * # Safety
 * `group` must be a live handle.
 */
enum EspStatus esp_group_check_axioms(const struct EspGroup *group);

/**
 * Runs the verification suite. `quick != 0` uses reduced sample counts.
 * The JSON report is returned through `report_json` (free with
 * [`esp_string_free`]) even when checks fail (`ESP_STATUS_CHECK_FAILED`).
 *
 * # Safety
 * `report_json` must be writable or NULL.
 */
enum EspStatus esp_verify_run(bool quick, char **report_json);

/**
 * Trains one seed from a TOML configuration string into `run_dir` and
 * writes the final mean evaluation return.
 *
 * # Safety
 * Strings must be NUL-terminated; `final_return` may be NULL.
 */
enum EspStatus esp_train(const char *config_toml,
                         uint64_t seed,
                         const char *run_dir,
                         double *final_return);

/**
 * Evaluates a checkpoint on its own environment with deterministic actions.
 *
 * # Safety
 * `path` must be NUL-terminated; outputs may be NULL.
 */
enum EspStatus esp_evaluate(const char *path,
                            size_t episodes,
                            uint64_t seed,
                            double *mean_return,
                            double *stderr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESP_FFI_H */
