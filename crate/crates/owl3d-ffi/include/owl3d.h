#ifndef OWL3D_H
#define OWL3D_H

/* This file is generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Score kinds exposed over the ABI; values match `owl3d_id_score`'s
 * `kind` argument.
 */
typedef enum {
  OWL3D_SCORE_KIND_MSP = 0,
  OWL3D_SCORE_KIND_MAX_LOGIT = 1,
  OWL3D_SCORE_KIND_SUM_LOGIT = 2,
  OWL3D_SCORE_KIND_MAX_PROB = 3,
  OWL3D_SCORE_KIND_SUM_PROB = 4,
  OWL3D_SCORE_KIND_MAX_ENERGY = 5,
  OWL3D_SCORE_KIND_JOINT_ENERGY = 6,
  OWL3D_SCORE_KIND_ENERGY = 7,
} Owl3dScoreKind;

/**
 * Status code returned by every fallible function.
 */
typedef enum {
  OWL3D_STATUS_OK = 0,
  OWL3D_STATUS_INVALID_ARGUMENT = 1,
  OWL3D_STATUS_IO_ERROR = 2,
  OWL3D_STATUS_FORMAT_ERROR = 3,
  OWL3D_STATUS_NULL_POINTER = 4,
} Owl3dStatus;

/**
 * Opaque point-cloud handle.
 */
typedef struct Owl3dCloud Owl3dCloud;

/**
 * Oriented 3D box (mirror of the library type).
 */
typedef struct {
  double cx;
  double cy;
  double cz;
  double l;
  double w;
  double h;
  double yaw;
} Owl3dBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *owl3d_last_error_message(void);

Owl3dStatus owl3d_bev_iou(const Owl3dBox *a, const Owl3dBox *b, double *out);

Owl3dStatus owl3d_iou_3d(const Owl3dBox *a, const Owl3dBox *b, double *out);

Owl3dStatus owl3d_center_distance(const Owl3dBox *a, const Owl3dBox *b, double *out);

/**
 * Build a cloud from `count` points laid out as (x, y, z, intensity)
 * f64 quads. The handle must be released with `owl3d_cloud_free`.
 */
Owl3dStatus owl3d_cloud_create(const double *xyzi, uintptr_t count, Owl3dCloud **out);

/**
 * Read a velodyne-format `.bin` file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated UTF-8 string.
 */
Owl3dStatus owl3d_cloud_read(const char *path, Owl3dCloud **out);

/**
 * Write a cloud as a velodyne-format `.bin` file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated UTF-8 string and `cloud` a live
 * handle from this API.
 */
Owl3dStatus owl3d_cloud_write(const Owl3dCloud *cloud, const char *path);

Owl3dStatus owl3d_cloud_len(const Owl3dCloud *cloud, uintptr_t *out);

/**
 * Indices of cloud points inside the box. `indices` must have room for
 * `capacity` entries; the number found is written to `out_count` even
 * when it exceeds the capacity (only `capacity` indices are stored).
 */
Owl3dStatus owl3d_points_in_box(const Owl3dCloud *cloud,
                                const Owl3dBox *b,
                                uintptr_t *indices,
                                uintptr_t capacity,
                                uintptr_t *out_count);

/**
 * Rigidly move a cloud/box pair to a new pose; returns a new handle.
 */
Owl3dStatus owl3d_transform_object(const Owl3dCloud *cloud,
                                   const Owl3dBox *b,
                                   double new_cx,
                                   double new_cy,
                                   double new_cz,
                                   double new_yaw,
                                   Owl3dCloud **out_cloud,
                                   Owl3dBox *out_box);

/**
 * Release a cloud handle. Null is a no-op.
 */
void owl3d_cloud_free(Owl3dCloud *cloud);

/**
 * Optimal one-to-one assignment over a row-major cost matrix. Writes
 * `min(rows, cols)` (row, col) pairs into `out_rows`/`out_cols` (each of
 * that capacity) and the total selected cost into `out_cost`.
 */
Owl3dStatus owl3d_hungarian(const double *cost,
                            uintptr_t rows,
                            uintptr_t cols,
                            bool maximize,
                            uintptr_t *out_rows,
                            uintptr_t *out_cols,
                            double *out_cost);

/**
 * ID-ness score of a logit vector (higher = more in-distribution).
 */
Owl3dStatus owl3d_id_score(const double *logits,
                           uintptr_t len,
                           Owl3dScoreKind kind,
                           double temperature,
                           double *out);

Owl3dStatus owl3d_auroc(const double *id_scores,
                        uintptr_t n_id,
                        const double *ood_scores,
                        uintptr_t n_ood,
                        double *out);

Owl3dStatus owl3d_aupr(const double *id_scores,
                       uintptr_t n_id,
                       const double *ood_scores,
                       uintptr_t n_ood,
                       double *out);

Owl3dStatus owl3d_fpr_at_tpr(const double *id_scores,
                             uintptr_t n_id,
                             const double *ood_scores,
                             uintptr_t n_ood,
                             double tpr_target,
                             double *out);

/**
 * Free energy -T log sum e^{f/T} of a logit vector.
 */
Owl3dStatus owl3d_energy(const double *logits, uintptr_t len, double temperature, double *out);

/**
 * Mean binary focal loss and its gradient (`out_grad` capacity `len`).
 */
Owl3dStatus owl3d_focal_loss(const double *logits,
                             const uint8_t *labels,
                             uintptr_t len,
                             double alpha,
                             double gamma,
                             double *out_loss,
                             double *out_grad);

/**
 * Outlier-aware supervised contrastive loss over row-major embeddings
 * (`n` rows by `dim`). `labels[i] < 0` marks an outlier row; other values
 * are class ids. `out_grads` has capacity `n * dim`.
 */
Owl3dStatus owl3d_supcon_ood_loss(const double *embeddings,
                                  uintptr_t n,
                                  uintptr_t dim,
                                  const int64_t *labels,
                                  double tau_c,
                                  double *out_loss,
                                  double *out_grads);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* OWL3D_H */
