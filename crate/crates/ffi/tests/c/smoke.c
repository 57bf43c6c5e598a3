#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "tdil.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    TdilStatus s_ = (call);                                                      \
    if (s_ != TDIL_STATUS_OK) {                                                  \
      const char *m_ = tdil_last_error_message();                                \
      fprintf(stderr, "%s failed with %d: %s\n", #call, (int)s_, m_ ? m_ : "");  \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

int main(void) {
  TdilEnv *env = NULL;
  CHECK(tdil_env_new(0, 7, &env));
  size_t side = 0;
  CHECK(tdil_env_image_size(env, &side));
  size_t len = 3 * side * side;
  uint8_t *image = malloc(len);
  double state[TDIL_STATE_LEN];
  double gaze[2] = {0.0, 0.0};
  CHECK(tdil_env_observe(env, image, len, gaze, state, TDIL_STATE_LEN));
  double cmd[2 * TDIL_ARM_COMMAND_LEN] = {0.01, 0.0, 0.0, 60.0, -0.01, 0.0, 0.0, 60.0};
  for (int i = 0; i < 5; i++) CHECK(tdil_env_step(env, cmd));
  bool done = true, success = true;
  CHECK(tdil_env_status(env, &done, &success));
  if (done || success) return 2;

  if (tdil_env_new(9, 0, &env) != TDIL_STATUS_INVALID_ARGUMENT) return 3;
  if (tdil_last_error_message() == NULL) return 4;

  double eye[TDIL_ATTENTION_SIZE * TDIL_ATTENTION_SIZE];
  memset(eye, 0, sizeof eye);
  for (int i = 0; i < TDIL_ATTENTION_SIZE; i++) eye[i * TDIL_ATTENTION_SIZE + i] = 1.0;
  double roll[TDIL_ATTENTION_SIZE * TDIL_ATTENTION_SIZE];
  CHECK(tdil_attention_rollout(eye, 1, TDIL_ATTENTION_SIZE, true, roll));
  double dom[TDIL_DOMAIN_COUNT];
  CHECK(tdil_domain_attention(roll, dom));
  double total = dom[0] + dom[1] + dom[2] + dom[3];
  if (total < TDIL_ATTENTION_SIZE - 1e-9 || total > TDIL_ATTENTION_SIZE + 1e-9) return 5;

  tdil_env_free(env);
  free(image);
  printf("ok %s\n", tdil_version());
  return 0;
}
