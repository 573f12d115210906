#ifndef COMPSEM_H
#define COMPSEM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Zero is success.
 */
typedef enum CompsemStatus {
  COMPSEM_STATUS_OK = 0,
  COMPSEM_STATUS_NULL_ARGUMENT = 1,
  COMPSEM_STATUS_INVALID_UTF8 = 2,
  COMPSEM_STATUS_IO = 3,
  COMPSEM_STATUS_INVALID_CHECKPOINT = 4,
  COMPSEM_STATUS_INVALID_GRAPH = 5,
  COMPSEM_STATUS_INVALID_QUESTION = 6,
  COMPSEM_STATUS_INTERNAL = 7,
} CompsemStatus;

/*
 A loaded model. Read-only once created, so one handle may serve several
 threads at once.
 */
typedef struct CompsemModel CompsemModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Loads a checkpoint file. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CompsemStatus compsem_model_load(const char *path, struct CompsemModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must come from [`compsem_model_load`] and not be freed twice.
 */
void compsem_model_free(struct CompsemModel *model);

/*
 Answers `question` against the graph in `kg_json`. `*out` receives a JSON
 object with `answer_type`, `p_type`, `answer` and `grounding`.

 # Safety
 `model` must be a live handle; strings NUL-terminated; `out` valid.
 */
enum CompsemStatus compsem_answer(const struct CompsemModel *model,
                                  const char *kg_json,
                                  const char *question,
                                  char **out);

/*
 Highest-scoring derivation as JSON `{"tree": ..., "ascii": ...}`.

 # Safety
 Same contract as [`compsem_answer`].
 */
enum CompsemStatus compsem_parse(const struct CompsemModel *model,
                                 const char *kg_json,
                                 const char *question,
                                 char **out);

/*
 Frees a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void compsem_string_free(char *s);

/*
 Message for the last failed call on this thread, or null. Owned by the
 library; valid until the next call on the same thread.
 */
const char *compsem_last_error(void);

/*
 Short description of a status code. Static storage.
 */
const char *compsem_status_str(enum CompsemStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPSEM_H */
