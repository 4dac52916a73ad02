#ifndef CASCADE_FFI_H
#define CASCADE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CascadeSplit {
  CASCADE_SPLIT_TRAIN = 0,
  CASCADE_SPLIT_TEST = 1,
} CascadeSplit;

/**
 * Result of a fallible call.
 */
typedef enum CascadeStatus {
  CASCADE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CASCADE_STATUS_NULL_ARGUMENT = 1,
  CASCADE_STATUS_INVALID_ARGUMENT = 2,
  CASCADE_STATUS_CONFIG = 3,
  /**
   * Malformed dataset or model file.
   */
  CASCADE_STATUS_FORMAT = 4,
  CASCADE_STATUS_IO = 5,
  /**
   * Training diverged or produced non-finite values.
   */
  CASCADE_STATUS_NUMERIC = 6,
  /**
   * The output buffer is too small; the needed length was written.
   */
  CASCADE_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * Internal failure, including a caught panic.
   */
  CASCADE_STATUS_INTERNAL = 8,
} CascadeStatus;

/**
 * Scenes plus the header they were generated from.
 */
typedef struct CascadeDataset CascadeDataset;

typedef struct CascadeDetector CascadeDetector;

typedef struct CascadeReport CascadeReport;

/**
 * One detection, corners in canvas pixels.
 */
typedef struct CascadeDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  uint32_t class_id;
  double score;
} CascadeDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *cascade_last_error(void);

/**
 * Library version as a static string.
 */
const char *cascade_version(void);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must point to four doubles; `out` must be writable.
 */
enum CascadeStatus cascade_iou(const double *a, const double *b, double *out);

/**
 * Generates `count` scenes of `split` (0 means the configured count).
 * `config_toml` may be null for defaults.
 *
 * # Safety
 * `config_toml` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum CascadeStatus cascade_dataset_generate(const char *config_toml,
                                            uint64_t seed,
                                            enum CascadeSplit split,
                                            size_t count,
                                            struct CascadeDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CascadeStatus cascade_dataset_load(const char *path, struct CascadeDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `path` a NUL-terminated string.
 */
enum CascadeStatus cascade_dataset_save(const struct CascadeDataset *ds, const char *path);

/**
 * Number of scenes, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t cascade_dataset_num_scenes(const struct CascadeDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void cascade_dataset_free(struct CascadeDataset *ds);

/**
 * Trains the configured variant on `ds`. The dataset's scene layout
 * overrides the one in `config_toml`, which may be null.
 *
 * # Safety
 * `ds` must be a live dataset handle; `config_toml` null or a
 * NUL-terminated string; `out` writable.
 */
enum CascadeStatus cascade_detector_train(const struct CascadeDataset *ds,
                                          const char *config_toml,
                                          struct CascadeDetector **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum CascadeStatus cascade_detector_load(const char *path, struct CascadeDetector **out);

/**
 * # Safety
 * `det` must be a live detector handle; `path` a NUL-terminated string.
 */
enum CascadeStatus cascade_detector_save(const struct CascadeDetector *det, const char *path);

/**
 * Number of stages, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live detector handle.
 */
size_t cascade_detector_num_stages(const struct CascadeDetector *det);

/**
 * # Safety
 * `det` must be null or a handle not yet freed.
 */
void cascade_detector_free(struct CascadeDetector *det);

/**
 * Detects objects in scene `scene_index` of `ds`. `*written` receives the
 * number of detections; when it exceeds `capacity` nothing is copied and
 * `CASCADE_STATUS_BUFFER_TOO_SMALL` is returned. `test_stage` is null for
 * the default or a selector such as `"2"` or `"1~3"`.
 *
 * # Safety
 * Handles must be live; `buf` must hold `capacity` elements (it may be null
 * when `capacity` is 0); `written` must be writable.
 */
enum CascadeStatus cascade_detect(const struct CascadeDetector *det,
                                  const struct CascadeDataset *ds,
                                  size_t scene_index,
                                  const char *test_stage,
                                  struct CascadeDetection *buf,
                                  size_t capacity,
                                  size_t *written);

/**
 * Evaluates `det` on every scene of `ds`.
 *
 * # Safety
 * Handles must be live; `test_stage` null or a NUL-terminated string;
 * `out` writable.
 */
enum CascadeStatus cascade_evaluate(const struct CascadeDetector *det,
                                    const struct CascadeDataset *ds,
                                    const char *test_stage,
                                    struct CascadeReport **out);

/**
 * Mean AP over IoU thresholds 0.50:0.05:0.95.
 *
 * # Safety
 * `r` must be a live report handle; `out` writable.
 */
enum CascadeStatus cascade_report_mean_ap(const struct CascadeReport *r, double *out);

/**
 * AP at one of the thresholds 0.50, 0.55, ..., 0.95.
 *
 * # Safety
 * `r` must be a live report handle; `out` writable.
 */
enum CascadeStatus cascade_report_ap_at(const struct CascadeReport *r,
                                        double iou_threshold,
                                        double *out);

/**
 * The report as JSON. Owned by the report; valid until it is freed.
 *
 * # Safety
 * `r` must be null or a live report handle.
 */
const char *cascade_report_json(const struct CascadeReport *r);

/**
 * # Safety
 * `r` must be null or a handle not yet freed.
 */
void cascade_report_free(struct CascadeReport *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADE_FFI_H */
