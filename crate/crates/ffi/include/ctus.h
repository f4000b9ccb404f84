#ifndef CTUS_H
#define CTUS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtusStatus {
  CtusStatus_Ok = 0,
  CtusStatus_NullPointer = 1,
  CtusStatus_InvalidArgument = 2,
  CtusStatus_Io = 3,
  CtusStatus_Format = 4,
  CtusStatus_Registration = 5,
  CtusStatus_BufferTooSmall = 6,
  CtusStatus_Panic = 99,
} CtusStatus;

typedef struct CtusCloud CtusCloud;

typedef struct CtusImager CtusImager;

typedef struct CtusVolume CtusVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *ctus_last_error(void);

/**
 * Energy reflection coefficient and refraction angle (radians; NaN under
 * total internal reflection).
 *
 * # Safety
 * `out_r` and `out_theta_t` must be valid for writes.
 */
enum CtusStatus ctus_fresnel_reflection(double z1,
                                        double z2,
                                        double theta_i,
                                        double *out_r,
                                        double *out_theta_t);

/**
 * `i0 · 10^(−alpha·a·d_cm·f_mhz / 10)`, `a` in dB/cm/MHz.
 */
double ctus_beer_absorption(double i0, double a, double d_cm, double f_mhz, double alpha);

/**
 * Loads a `.ctvol.json` volume.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum CtusStatus ctus_volume_load(const char *path, struct CtusVolume **out);

/**
 * The built-in synthetic spine phantom with `vertebrae` levels.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CtusStatus ctus_volume_phantom(uintptr_t vertebrae, struct CtusVolume **out);

/**
 * # Safety
 * `vol` must be a live handle; `out_dims` valid for 3 writes.
 */
enum CtusStatus ctus_volume_dims(const struct CtusVolume *vol, uintptr_t *out_dims);

/**
 * HU at a world point (trilinear; air outside).
 *
 * # Safety
 * `vol` must be a live handle; `p` valid for 3 reads; `out` for a write.
 */
enum CtusStatus ctus_volume_hu_at(const struct CtusVolume *vol, const double *p, double *out);

/**
 * # Safety
 * `vol` must be null or a handle from this library, freed once.
 */
void ctus_volume_free(struct CtusVolume *vol);

/**
 * Imager with default probe, physics, press and synthesis parameters.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum CtusStatus ctus_imager_new_default(struct CtusImager **out);

/**
 * Imager built from the parameter sections of a simulation config.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum CtusStatus ctus_imager_from_config(const char *path, struct CtusImager **out);

/**
 * Output image `rows × cols`.
 *
 * # Safety
 * `imager` must be a live handle; outputs valid for writes.
 */
enum CtusStatus ctus_imager_image_size(const struct CtusImager *imager,
                                       uintptr_t *out_rows,
                                       uintptr_t *out_cols);

/**
 * Renders one frame. `pose` is `[x, y, z, qw, qx, qy, qz]`; `image` and
 * `label` (0/255) receive `rows·cols` bytes in row-major order.
 *
 * # Safety
 * Handles must be live; `pose` valid for 7 reads; `image` and `label`
 * valid for `len` writes.
 */
enum CtusStatus ctus_imager_synthesize(const struct CtusImager *imager,
                                       const struct CtusVolume *vol,
                                       const double *pose,
                                       uint64_t seed,
                                       uint8_t *image,
                                       uint8_t *label,
                                       uintptr_t len);

/**
 * # Safety
 * `imager` must be null or a handle from this library, freed once.
 */
void ctus_imager_free(struct CtusImager *imager);

/**
 * Cloud from `n` packed `xyz` triples.
 *
 * # Safety
 * `xyz` valid for `3n` reads; `out` valid for writes.
 */
enum CtusStatus ctus_cloud_new(const double *xyz, uintptr_t n, struct CtusCloud **out);

/**
 * Reads an ASCII PLY or JSON cloud.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum CtusStatus ctus_cloud_load(const char *path, struct CtusCloud **out);

/**
 * Number of points; 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
uintptr_t ctus_cloud_len(const struct CtusCloud *cloud);

/**
 * # Safety
 * `cloud` must be null or a handle from this library, freed once.
 */
void ctus_cloud_free(struct CtusCloud *cloud);

/**
 * Coarse alignment plus trimmed ICP of `src` onto `dst`. `out_rt` receives
 * the row-major rotation followed by the translation (12 values),
 * `out_mse_xyz` three per-axis mean squared residuals (may be null).
 *
 * # Safety
 * Handles must be live; `out_rt` valid for 12 writes, `out_rms` for one,
 * `out_mse_xyz` null or valid for 3 writes.
 */
enum CtusStatus ctus_register(const struct CtusCloud *src,
                              const struct CtusCloud *dst,
                              double trim_fraction,
                              uintptr_t max_iter,
                              double *out_rt,
                              double *out_rms,
                              double *out_mse_xyz);

/**
 * Screw tip and axis error. Transforms are 12 values (row-major rotation,
 * then translation); `out` receives `[dx, dy, dz, |d|, angle_deg]`.
 *
 * # Safety
 * `entry`, `tip` valid for 3 reads; `t_est`, `t_gt` for 12; `out` for 5
 * writes.
 */
enum CtusStatus ctus_screw_error(const double *entry,
                                 const double *tip,
                                 const double *t_est,
                                 const double *t_gt,
                                 double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctus_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTUS_H */
