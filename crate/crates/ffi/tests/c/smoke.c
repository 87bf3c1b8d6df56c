#include <stdio.h>
#include <string.h>

#include "esp_ffi.h"

#define CHECK(cond)                                              \
  do {                                                           \
    if (!(cond)) {                                               \
      const char *msg = esp_last_error_message();                \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, \
              msg ? msg : "no error message");                   \
      return 1;                                                  \
    }                                                            \
  } while (0)

int main(void) {
  EspGroup *group = NULL;
  CHECK(esp_group_new("c4", &group) == ESP_STATUS_OK);
  CHECK(esp_group_order(group) == 4);
  CHECK(esp_group_check_axioms(group) == ESP_STATUS_OK);
  double v[2] = {1.0, 0.0}, out[2];
  CHECK(esp_group_apply(group, 1, v, out) == ESP_STATUS_OK);
  CHECK(out[0] == 0.0 && out[1] == 1.0);
  esp_group_free(group);

  EspEnv *env = NULL;
  CHECK(esp_env_new("predator_prey", 0, &env) == ESP_STATUS_OK);
  size_t n = 0, width = 0;
  CHECK(esp_env_dims(env, &n, NULL, NULL, &width) == ESP_STATUS_OK);
  CHECK(n == 3 && width == 1);
  CHECK(esp_env_reset(env, 1) == ESP_STATUS_OK);
  double actions[3] = {1, 2, 3}, reward = 0;
  bool done = false;
  CHECK(esp_env_step(env, actions, 3, &reward, &done) == ESP_STATUS_OK);
  double rdev = 1, tdev = 1;
  CHECK(esp_env_check_symmetry(env, "d4", 50, 0, &rdev, &tdev) == ESP_STATUS_OK);
  esp_env_free(env);

  CHECK(esp_env_new("nowhere", 3, &env) == ESP_STATUS_INVALID_ARGUMENT);
  CHECK(env == NULL);
  CHECK(strstr(esp_last_error_message(), "nowhere") != NULL);
  printf("ok %s\n", esp_version());
  return 0;
}
