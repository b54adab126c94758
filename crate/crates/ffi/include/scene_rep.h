#ifndef SCENE_REP_H
#define SCENE_REP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_POINTER = 1,
  SR_STATUS_INVALID_ARGUMENT = 2,
  SR_STATUS_IO = 3,
  SR_STATUS_PARSE = 4,
  SR_STATUS_CHECKPOINT = 5,
  SR_STATUS_RUNTIME = 6,
  SR_STATUS_PANIC = 7,
} SrStatus;

typedef enum SrOutcome {
  SR_OUTCOME_RUNNING = 0,
  SR_OUTCOME_GOAL = 1,
  SR_OUTCOME_COLLISION = 2,
  SR_OUTCOME_OFF_ROUTE = 3,
  SR_OUTCOME_TIMEOUT = 4,
} SrOutcome;

/**
 * Opaque simulator with the ego's observation history.
 */
typedef struct SrEnv SrEnv;

/**
 * Opaque trained policy.
 */
typedef struct SrPolicy SrPolicy;

/**
 * Aggregate evaluation metrics; rates are percentages and completion
 * times are NaN when no episode succeeded.
 */
typedef struct SrEvalSummary {
  uint32_t episodes;
  double success_rate;
  double collision_rate;
  double stagnation_rate;
  double off_route_rate;
  double completion_time_mean;
  double completion_time_std;
} SrEvalSummary;

/**
 * Result of one environment step.
 */
typedef struct SrStep {
  double reward;
  bool done;
  enum SrOutcome outcome;
  uint32_t episode_step;
  /**
   * Commanded target speed (m/s).
   */
  double target_speed;
  /**
   * Commanded lane change: -1 left, 0 keep, +1 right.
   */
  int8_t lane_command;
} SrStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sr_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns its full length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sr_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file into a new policy handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SrStatus sr_policy_load(const char *path, struct SrPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`sr_policy_load`] not yet freed.
 */
void sr_policy_free(struct SrPolicy *policy);

/**
 * Mean action of the policy for the environment's current state,
 * written as raw values in [-1, 1] to `out[0..2]`.
 *
 * # Safety
 * Handles must be live; `out` must point to two writable doubles.
 */
enum SrStatus sr_policy_act(const struct SrPolicy *policy, const struct SrEnv *env, double *out);

/**
 * Deterministic evaluation of `policy` on a scenario preset name or JSON
 * file path.
 *
 * # Safety
 * `policy` must be live, `scenario` a valid string and `out` writable.
 */
enum SrStatus sr_evaluate(const struct SrPolicy *policy,
                          const char *scenario,
                          uint32_t episodes,
                          uint64_t seed,
                          struct SrEvalSummary *out);

/**
 * Creates a simulator for a scenario preset name or JSON file path. The
 * observation layout follows `policy` when given, else the defaults.
 *
 * # Safety
 * `scenario` must be a valid string, `policy` null or live, `out` valid.
 */
enum SrStatus sr_env_new(const char *scenario, const struct SrPolicy *policy, struct SrEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`sr_env_new`] not yet freed.
 */
void sr_env_free(struct SrEnv *env);

/**
 * Starts a new episode.
 *
 * # Safety
 * `env` must be live.
 */
enum SrStatus sr_env_reset(struct SrEnv *env, uint64_t seed);

/**
 * Applies a raw action `[speed, lane]` in [-1, 1]^2.
 *
 * # Safety
 * `env` must be live; `action` must point to two doubles; `out` writable.
 */
enum SrStatus sr_env_step(struct SrEnv *env, const double *action, struct SrStep *out);

/**
 * Number of vehicles currently simulated, ego included.
 *
 * # Safety
 * `env` must be live and `out` writable.
 */
enum SrStatus sr_env_vehicle_count(const struct SrEnv *env, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENE_REP_H */
