#ifndef MDFNET_H
#define MDFNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MdfStatus {
  MDF_STATUS_OK = 0,
  MDF_STATUS_NULL_POINTER = 1,
  MDF_STATUS_INVALID_ARGUMENT = 2,
  MDF_STATUS_IO = 3,
  MDF_STATUS_FORMAT = 4,
  MDF_STATUS_CHECKPOINT_MISMATCH = 5,
  MDF_STATUS_NUMERIC = 6,
  MDF_STATUS_BUFFER_TOO_SMALL = 7,
  MDF_STATUS_PANIC = 8,
} MdfStatus;

// Opaque model handle.
typedef struct MdfModel MdfModel;

// Triage record. Numeric fields use NaN for a missing value; `gender` is
// 0 for M, 1 for F and -1 when missing.
typedef struct MdfClinical {
  double temperature;
  double heartrate;
  double resprate;
  double o2sat;
  double sbp;
  double dbp;
  double pain;
  double acuity;
  double age;
  int32_t gender;
} MdfClinical;

// Axis-aligned box: top-left corner plus width and height, in pixels.
typedef struct MdfBox {
  double x;
  double y;
  double w;
  double h;
} MdfBox;

// `class_id` is 0..=4 in the order: enlarged cardiac silhouette, atelectasis,
// consolidation, pleural abnormality, pulmonary edema.
typedef struct MdfDetection {
  uint32_t class_id;
  double score;
  struct MdfBox bbox;
} MdfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or NULL. Valid until the next call
// into this library from the same thread.
const char *mdf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *mdf_version(void);

// Loads a checkpoint; free the handle with [`mdf_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MdfStatus mdf_model_load(const char *path, struct MdfModel **out);

// # Safety
// `model` must come from [`mdf_model_load`] and not be freed twice.
void mdf_model_free(struct MdfModel *model);

// Side length of the square images the model expects.
//
// # Safety
// Pointers must be valid.
enum MdfStatus mdf_model_image_size(const struct MdfModel *model, size_t *out);

// Detects abnormalities in one grayscale image of `n_pixels` values in
// `[0, 1]`, row-major. Writes up to `capacity` detections, sorted by
// descending score, and their total number to `count`. When `count`
// exceeds `capacity` the call returns `BUFFER_TOO_SMALL` after filling the
// buffer. `clinical` may be NULL for models that ignore clinical data.
//
// # Safety
// `pixels` must hold `n_pixels` values and `out` room for `capacity`
// detections.
enum MdfStatus mdf_model_detect(const struct MdfModel *model,
                                const double *pixels,
                                size_t n_pixels,
                                const struct MdfClinical *clinical,
                                double score_thresh,
                                struct MdfDetection *out,
                                size_t capacity,
                                size_t *count);

// Intersection over the predicted box area.
//
// # Safety
// `out` must be valid.
enum MdfStatus mdf_iobb(struct MdfBox pred, struct MdfBox gt, double *out);

// Smooth-L1 distance summed over `n` coordinates.
//
// # Safety
// `pred` and `target` must hold `n` values; `out` must be valid.
enum MdfStatus mdf_smooth_l1(const double *pred,
                             const double *target,
                             size_t n,
                             double beta,
                             double *out);

// Writes a synthetic dataset with its joined manifest under `out_dir`;
// stores the number of joined instances in `joined`.
//
// # Safety
// `out_dir` must be a NUL-terminated string; `joined` may be NULL.
enum MdfStatus mdf_generate_dataset(const char *out_dir,
                                    uint64_t seed,
                                    size_t n_train,
                                    size_t n_test,
                                    double kappa,
                                    size_t *joined);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDFNET_H */
