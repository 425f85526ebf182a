#ifndef CEPHALO3D_H
#define CEPHALO3D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define C3D_LANDMARK_COUNT 12

typedef enum C3dStatus {
  C3D_STATUS_OK = 0,
  C3D_STATUS_NULL_POINTER = 1,
  C3D_STATUS_INVALID_ARGUMENT = 2,
  C3D_STATUS_IO = 3,
  C3D_STATUS_FORMAT = 4,
  C3D_STATUS_SHAPE = 5,
  C3D_STATUS_STATE = 6,
  C3D_STATUS_CONFIG = 7,
  C3D_STATUS_DATA = 8,
  C3D_STATUS_DIVERGED = 9,
  C3D_STATUS_NOT_FOUND = 10,
  C3D_STATUS_PANIC = 11,
} C3dStatus;

/**
 * A landmark set in world millimetres.
 */
typedef struct C3dLandmarks C3dLandmarks;

/**
 * A trained landmark model.
 */
typedef struct C3dModel C3dModel;

/**
 * A CT-like volume.
 */
typedef struct C3dVolume C3dVolume;

typedef struct C3dLandmarkError {
  double dx;
  double dy;
  double dz;
  double d3;
} C3dLandmarkError;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into this library from the same thread.
 */
const char *c3d_last_error_message(void);

size_t c3d_landmark_count(void);

/**
 * Static name of catalog entry `index`, or null when out of range.
 */
const char *c3d_landmark_name(size_t index);

/**
 * Reads a CVOL file.
 */
enum C3dStatus c3d_volume_read(const char *path, struct C3dVolume **out);

void c3d_volume_free(struct C3dVolume *v);

/**
 * Writes the voxel counts to `out_dims[0..3]`.
 */
enum C3dStatus c3d_volume_dims(const struct C3dVolume *v, size_t *out_dims);

/**
 * 1 for a normalized volume, 0 for raw HU, -1 for a null handle.
 */
int32_t c3d_volume_is_normalized(const struct C3dVolume *v);

/**
 * Generates one skull phantom on a `dims[0..3]` grid with isotropic
 * `spacing` mm. Either output may be null when not wanted.
 */
enum C3dStatus c3d_phantom_generate(const size_t *dims,
                                    double spacing,
                                    double jitter,
                                    uint64_t seed,
                                    struct C3dVolume **out_volume,
                                    struct C3dLandmarks **out_landmarks);

/**
 * Loads a checkpoint written by `cephalo3d train`.
 */
enum C3dStatus c3d_model_load(const char *path, struct C3dModel **out);

void c3d_model_free(struct C3dModel *m);

/**
 * Predicts world-frame landmarks. Raw volumes are preprocessed onto the
 * model grid; normalized volumes must already match it.
 */
enum C3dStatus c3d_predict(const struct C3dModel *m,
                           const struct C3dVolume *v,
                           struct C3dLandmarks **out);

/**
 * Copies landmark `index` (catalog order) into `out_xyz[0..3]`.
 */
enum C3dStatus c3d_landmarks_get(const struct C3dLandmarks *lm, size_t index, double *out_xyz);

/**
 * 1 for world millimetres, 0 for voxel indices, -1 for a null handle.
 */
int32_t c3d_landmarks_is_world(const struct C3dLandmarks *lm);

void c3d_landmarks_free(struct C3dLandmarks *lm);

/**
 * Per-axis absolute and Euclidean distance between two points.
 */
enum C3dStatus c3d_landmark_error(const double *reference,
                                  const double *predicted,
                                  struct C3dLandmarkError *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CEPHALO3D_H */
