#include <stdio.h>
#include <string.h>

#include "oopdbg.h"

#define CHECK(e)                                                              \
  do {                                                                        \
    if (!(e)) {                                                               \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #e,             \
              oopdbg_last_error());                                           \
      return 1;                                                               \
    }                                                                         \
  } while (0)

static const char *PROGRAM =
    "class P { method go(n) { var a; a := n + 1; halt; return a * 3; } }";

int main(void) {
  OopdbgImage *img = NULL;
  OopdbgExecution *ex = NULL, *copy = NULL;
  OopdbgBlob *blob = NULL;
  OopdbgExecStatus st;
  int64_t args[1] = {4};
  const uint8_t *data;
  size_t len;
  char out[32];
  size_t out_len;

  CHECK(oopdbg_image_load("class {", &img) == OOPDBG_STATUS_LOAD_FAILED);
  CHECK(strlen(oopdbg_last_error()) > 0);
  CHECK(oopdbg_image_load(PROGRAM, &img) == OOPDBG_STATUS_OK);
  CHECK(oopdbg_execution_spawn(img, "P", "go", args, 1, &ex) == OOPDBG_STATUS_OK);
  CHECK(oopdbg_execution_run(img, ex, 0, &st) == OOPDBG_STATUS_OK);
  CHECK(st == OOPDBG_EXEC_STATUS_SUSPENDED_ON_HALT);
  CHECK(oopdbg_snapshot(img, ex, 1, 1, &blob) == OOPDBG_STATUS_OK);
  CHECK(oopdbg_blob_bytes(blob, &data, &len) == OOPDBG_STATUS_OK);
  CHECK(len > 64 && memcmp(data, "OOPS", 4) == 0);
  CHECK(oopdbg_materialize(img, data, len, &copy) == OOPDBG_STATUS_OK);
  CHECK(oopdbg_execution_run(img, copy, 0, &st) == OOPDBG_STATUS_OK);
  CHECK(st == OOPDBG_EXEC_STATUS_COMPLETED);
  CHECK(oopdbg_execution_result(copy, out, sizeof out, &out_len) == OOPDBG_STATUS_OK);
  CHECK(strcmp(out, "15") == 0 && out_len == 2);

  oopdbg_blob_free(blob);
  oopdbg_execution_free(copy);
  oopdbg_execution_free(ex);
  oopdbg_image_free(img);
  puts("ok");
  return 0;
}
