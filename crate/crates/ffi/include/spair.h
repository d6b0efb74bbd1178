#ifndef SPAIR_H
#define SPAIR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SpairStatus {
  SPAIR_STATUS_OK = 0,
  SPAIR_STATUS_NULL_POINTER = 1,
  SPAIR_STATUS_INVALID_ARGUMENT = 2,
  SPAIR_STATUS_SHAPE = 3,
  SPAIR_STATUS_PARSE = 4,
  SPAIR_STATUS_IO = 5,
  SPAIR_STATUS_CONFIG = 6,
  SPAIR_STATUS_STRUCTURAL = 7,
  SPAIR_STATUS_NON_FINITE = 8,
  SPAIR_STATUS_EMPTY_REGION = 9,
  SPAIR_STATUS_PANIC = 10,
} SpairStatus;

/**
 * A decoded PPM or PGM image.
 */
typedef struct SpairImage SpairImage;

/**
 * A localization network and a restoration network.
 */
typedef struct SpairModel SpairModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *spair_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spair_version(void);

/**
 * Read a P6 or P5 file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SpairStatus spair_image_load(const char *path, struct SpairImage **out);

/**
 * Image from `channels` (1 or 3) planes of `height * width` floats.
 *
 * # Safety
 * `data` must point to `channels * height * width` floats.
 */
enum SpairStatus spair_image_from_planar(const float *data,
                                         size_t channels,
                                         size_t height,
                                         size_t width,
                                         struct SpairImage **out);

/**
 * Release an image. NULL is ignored.
 *
 * # Safety
 * `img` must come from this library and not be used afterwards.
 */
void spair_image_free(struct SpairImage *img);

/**
 * Writes channels, height and width of `img`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SpairStatus spair_image_dims(const struct SpairImage *img,
                                  size_t *channels,
                                  size_t *height,
                                  size_t *width);

/**
 * Planar pixel data of `img`, valid until the image is freed. NULL if
 * `img` is NULL.
 *
 * # Safety
 * `img` must be NULL or a live image.
 */
const float *spair_image_data(const struct SpairImage *img);

/**
 * Write `img` as P6 (3 channels) or P5 (1 channel).
 *
 * # Safety
 * `img` must be a live image and `path` a NUL-terminated string.
 */
enum SpairStatus spair_image_save(const struct SpairImage *img, const char *path);

/**
 * Build both networks from `config_path` (NULL for defaults) and load
 * their checkpoints.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be valid.
 */
enum SpairStatus spair_model_load(const char *config_path,
                                  const char *net_l_path,
                                  const char *net_r_path,
                                  struct SpairModel **out);

/**
 * Release a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void spair_model_free(struct SpairModel *model);

/**
 * Restore an RGB image. `*restored` receives a new RGB image and `*mask`
 * (if not NULL) the predicted one-channel mask.
 *
 * # Safety
 * `model` and `input` must be live handles; output pointers valid or NULL
 * where allowed.
 */
enum SpairStatus spair_model_restore(const struct SpairModel *model,
                                     const struct SpairImage *input,
                                     struct SpairImage **restored,
                                     struct SpairImage **mask);

/**
 * PSNR in dB of `a` against `b` for peak value 1.
 *
 * # Safety
 * Handles must be live and `out` valid.
 */
enum SpairStatus spair_psnr(const struct SpairImage *a, const struct SpairImage *b, double *out);

/**
 * Relative reduction, in percent, of RMSE and of DSSIM when going from the
 * reference method to another, given their PSNRs (dB) and SSIMs.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum SpairStatus spair_error_reduction(double psnr_ref,
                                       double psnr_method,
                                       double ssim_ref,
                                       double ssim_method,
                                       double *rmse_reduction_pct,
                                       double *dssim_reduction_pct);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPAIR_H */
