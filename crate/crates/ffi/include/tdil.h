#ifndef TDIL_H
#define TDIL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Values per arm in a command: dx, dy, dyaw, gripper angle in degrees.
#define TDIL_ARM_COMMAND_LEN 4

// Sensory state length: gaze (2) then left and right arm (10 each).
#define TDIL_STATE_LEN 22

// Tokens per attention matrix side.
#define TDIL_ATTENTION_SIZE 23

// Attention domains: image, gaze, left arm, right arm.
#define TDIL_DOMAIN_COUNT 4

typedef enum TdilStatus {
  TDIL_STATUS_OK = 0,
  TDIL_STATUS_NULL_POINTER = 1,
  TDIL_STATUS_INVALID_ARGUMENT = 2,
  TDIL_STATUS_USAGE = 3,
  TDIL_STATUS_CONFIG = 4,
  TDIL_STATUS_DIMENSION = 5,
  TDIL_STATUS_DATA = 6,
  TDIL_STATUS_FORMAT = 7,
  TDIL_STATUS_CORRUPTION = 8,
  TDIL_STATUS_IO = 9,
  TDIL_STATUS_SETUP = 10,
  TDIL_STATUS_DOMAIN = 11,
  TDIL_STATUS_NON_FINITE = 12,
  TDIL_STATUS_DIVERGED = 13,
  TDIL_STATUS_PANIC = 14,
} TdilStatus;

// Gaze predictor and policy loaded from training output directories.
typedef struct TdilAgent TdilAgent;

// Demonstration dataset read from disk.
typedef struct TdilDataset TdilDataset;

// Simulator instance.
typedef struct TdilEnv TdilEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *tdil_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *tdil_version(void);

// Creates an environment with default simulator settings. `task` is 0 for
// the two-object pick and 1 for the box push.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum TdilStatus tdil_env_new(uint32_t task, uint64_t seed, struct TdilEnv **out);

// # Safety
// `env` must be null or a handle from [`tdil_env_new`] not yet freed.
void tdil_env_free(struct TdilEnv *env);

// Resets to the initial world of `seed`, keeping the task.
//
// # Safety
// `env` must be a live handle.
enum TdilStatus tdil_env_reset(struct TdilEnv *env, uint64_t seed);

// Side length in pixels of the rendered image.
//
// # Safety
// `env` must be a live handle and `out` writable.
enum TdilStatus tdil_env_image_size(const struct TdilEnv *env, size_t *out);

// Renders the current frame as `3 × H × W` channel-major RGB bytes and
// writes both arm states (10 values each). `gaze` (2 values, may be null) is
// placed in front of the arm states when `state` has room for 22 values;
// pass `state_len` 20 to get the arm states alone.
//
// # Safety
// `env` must be a live handle; buffers must hold the stated lengths.
enum TdilStatus tdil_env_observe(const struct TdilEnv *env,
                                 uint8_t *image,
                                 size_t image_len,
                                 const double *gaze,
                                 double *state,
                                 size_t state_len);

// Applies one command: `[dx, dy, dyaw, grip_deg]` for the left arm followed
// by the same for the right arm (8 values).
//
// # Safety
// `env` must be a live handle and `command` point to 8 values.
enum TdilStatus tdil_env_step(struct TdilEnv *env, const double *command);

// Whether the episode has ended and whether its goal was reached.
//
// # Safety
// `env` must be a live handle; `done` and `success` writable or null.
enum TdilStatus tdil_env_status(const struct TdilEnv *env, bool *done, bool *success);

// Loads an agent from a policy directory and a gaze directory written by
// the training commands.
//
// # Safety
// Paths must be NUL-terminated strings and `out` writable.
enum TdilStatus tdil_agent_load(const char *policy_dir,
                                const char *gaze_dir,
                                struct TdilAgent **out);

// Creates an environment with the simulator settings the agent was trained
// with.
//
// # Safety
// `agent` must be a live handle and `out` writable.
enum TdilStatus tdil_agent_env_new(const struct TdilAgent *agent,
                                   uint32_t task,
                                   uint64_t seed,
                                   struct TdilEnv **out);

// # Safety
// `agent` must be null or a handle from [`tdil_agent_load`] not yet freed.
void tdil_agent_free(struct TdilAgent *agent);

// Number of trainable parameters in the agent's policy.
//
// # Safety
// `agent` must be a live handle and `out` writable.
enum TdilStatus tdil_agent_param_count(const struct TdilAgent *agent, size_t *out);

// Computes the agent's next command for the environment without applying
// it. Writes 8 command values (see [`tdil_env_step`]) and the 2-d gaze.
// When the policy is a transformer and `attention` is non-null, also writes
// the head-averaged attention of every layer (`layers × 23 × 23` values,
// `attention_len` must match) and sets `layers`.
//
// # Safety
// Handles must be live; buffers must hold the stated lengths.
enum TdilStatus tdil_agent_act(struct TdilAgent *agent,
                               const struct TdilEnv *env,
                               double *command,
                               double *gaze,
                               double *attention,
                               size_t attention_len,
                               size_t *layers);

// Reads a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum TdilStatus tdil_dataset_read(const char *path, struct TdilDataset **out);

// # Safety
// `ds` must be null or a handle from [`tdil_dataset_read`] not yet freed.
void tdil_dataset_free(struct TdilDataset *ds);

// Task code, episode count and image side length of the dataset.
//
// # Safety
// `ds` must be a live handle; outputs writable or null.
enum TdilStatus tdil_dataset_info(const struct TdilDataset *ds,
                                  uint32_t *task,
                                  size_t *episodes,
                                  size_t *image_size);

// Step count and reset seed of one episode.
//
// # Safety
// `ds` must be a live handle; outputs writable or null.
enum TdilStatus tdil_dataset_episode(const struct TdilDataset *ds,
                                     size_t episode,
                                     size_t *steps,
                                     uint64_t *seed);

// Copies one recorded step: the 22-d state, the 14-d action and the two
// ground-truth gripper flags. Any output may be null.
//
// # Safety
// `ds` must be a live handle; non-null buffers must hold 22, 14 and 2 values.
enum TdilStatus tdil_dataset_step(const struct TdilDataset *ds,
                                  size_t episode,
                                  size_t step,
                                  double *state,
                                  double *action,
                                  uint8_t *grip);

// Attention rollout over `layers` stacked row-stochastic `size × size`
// matrices, written to `out` (`size × size`). With `residual` each layer is
// mixed half and half with the identity before multiplying.
//
// # Safety
// `matrices` must hold `layers × size × size` values and `out` `size × size`.
enum TdilStatus tdil_attention_rollout(const double *matrices,
                                       size_t layers,
                                       size_t size,
                                       bool residual,
                                       double *out);

// Attention received by each domain (image, gaze, left, right) from a
// 23 × 23 rollout, summed over all query rows.
//
// # Safety
// `rollout` must hold 529 values and `out` 4.
enum TdilStatus tdil_domain_attention(const double *rollout, double *out);

// Z-scores `series` into `out` (both `len` values). A constant series maps
// to zeros.
//
// # Safety
// Both buffers must hold `len` values.
enum TdilStatus tdil_normalize_trace(const double *series, size_t len, double *out);

// Linearly resamples `series` (`len` values) to `target_len` points.
//
// # Safety
// `series` must hold `len` values and `out` `target_len`.
enum TdilStatus tdil_resample_trace(const double *series,
                                    size_t len,
                                    double *out,
                                    size_t target_len);

// Expands a 22-d sensory state into 22 tokens of 23 values each
// (`[value, one-hot position]`), row-major.
//
// # Safety
// `state` must hold 22 values and `out` 506.
enum TdilStatus tdil_tokenize_state(const double *state, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TDIL_H */
