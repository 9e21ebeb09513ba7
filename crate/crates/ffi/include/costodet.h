#ifndef COSTODET_H
#define COSTODET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CstdSchedule {
  CSTD_SCHEDULE_COSINE = 0,
  CSTD_SCHEDULE_LINEAR = 1,
} CstdSchedule;

typedef enum CstdStatus {
  CSTD_STATUS_OK = 0,
  CSTD_STATUS_NULL_POINTER = 1,
  CSTD_STATUS_INVALID_ARGUMENT = 2,
  CSTD_STATUS_DATA = 3,
  CSTD_STATUS_NON_FINITE = 4,
  CSTD_STATUS_CHECKPOINT = 5,
  CSTD_STATUS_IO = 6,
  CSTD_STATUS_PANIC = 7,
} CstdStatus;

typedef enum CstdTask {
  CSTD_TASK_ANTICIPATION = 0,
  CSTD_TASK_RECOGNITION = 1,
} CstdTask;

// Opaque trained model.
typedef struct CstdModel CstdModel;

// Opaque recurrent state of one video stream.
typedef struct CstdSession CstdSession;

typedef struct CstdModelInfo {
  int32_t task;
  size_t observation_dim;
  // Length of one task-branch output row.
  size_t output_dim;
  // Anticipated events or recognized phases.
  size_t channels;
  double horizon;
  size_t diffusion_steps;
} CstdModelInfo;

// Errors of one anticipation channel; undefined entries are NaN.
typedef struct CstdChannelMetrics {
  double mae;
  double in_mae;
  double out_mae;
  double wmae;
  double emae;
} CstdChannelMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *cstd_last_error(void);

// Loads a checkpoint into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum CstdStatus cstd_model_load(const char *path, struct CstdModel **out);

// # Safety
// `model` must come from [`cstd_model_load`] and not be freed twice. Null is ignored.
void cstd_model_free(struct CstdModel *model);

// # Safety
// `model` must be a live handle and `info` writable.
enum CstdStatus cstd_model_info(const struct CstdModel *model, struct CstdModelInfo *info);

// Starts a stream with a zero recurrent state.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum CstdStatus cstd_session_new(const struct CstdModel *model, struct CstdSession **out);

// # Safety
// `session` must come from [`cstd_session_new`] and not be freed twice. Null is ignored.
void cstd_session_free(struct CstdSession *session);

// Number of frames consumed by the session.
//
// # Safety
// `session` must be a live handle and `frames` writable.
enum CstdStatus cstd_session_frames(const struct CstdSession *session, size_t *frames);

// Consumes one frame and writes the raw task-branch output row.
//
// # Safety
// `observation` must hold `observation_len` values and `output` `output_len`
// writable values; both lengths must match [`CstdModelInfo`].
enum CstdStatus cstd_session_step(const struct CstdModel *model,
                                  struct CstdSession *session,
                                  const double *observation,
                                  size_t observation_len,
                                  double *output,
                                  size_t output_len);

// Consumes one frame of an anticipation model and writes the remaining
// time of each channel in time units.
//
// # Safety
// As [`cstd_session_step`], with `remaining` holding `channels` values.
enum CstdStatus cstd_session_anticipate(const struct CstdModel *model,
                                        struct CstdSession *session,
                                        const double *observation,
                                        size_t observation_len,
                                        double *remaining,
                                        size_t channels);

// Writes `ᾱ_1..ᾱ_steps` of a schedule into `out`, which holds `steps` values.
//
// # Safety
// `out` must hold `steps` writable values.
enum CstdStatus cstd_schedule_alpha_bars(enum CstdSchedule kind, size_t steps, double *out);

// Anticipation errors of one channel over `len` frames with horizon `horizon`.
//
// # Safety
// `preds` and `labels` must hold `len` values and `out` be writable.
enum CstdStatus cstd_channel_metrics(const double *preds,
                                     const double *labels,
                                     size_t len,
                                     double horizon,
                                     struct CstdChannelMetrics *out);

// Smoothness of one channel's predictions inside the horizon; NaN when undefined.
//
// # Safety
// `preds` and `labels` must hold `len` values and `out` be writable.
enum CstdStatus cstd_smooth(const double *preds,
                            const double *labels,
                            size_t len,
                            double horizon,
                            bool segment_aware,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSTODET_H */
