#ifndef VITVS_H
#define VITVS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum VitvsStatus {
  VITVS_STATUS_OK = 0,
  VITVS_STATUS_NULL_POINTER = 1,
  VITVS_STATUS_CONFIG = 2,
  VITVS_STATUS_IO = 3,
  VITVS_STATUS_SHAPE = 4,
  VITVS_STATUS_INVALID_INPUT = 5,
  VITVS_STATUS_PANIC = 6,
  VITVS_STATUS_NON_FINITE = 7,
} VitvsStatus;

// A loaded model.
typedef struct VitvsModel VitvsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vitvs_version(void);

// Message of the calling thread's last failure, or NULL if there was none.
// The pointer stays valid until the next failing call on this thread.
const char *vitvs_last_error_message(void);

// Loads a checkpoint written by the `vitvs` tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum VitvsStatus vitvs_model_load(const char *path, struct VitvsModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`vitvs_model_load`] and not be used afterwards.
void vitvs_model_free(struct VitvsModel *model);

// Side length of the model's square input image.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum VitvsStatus vitvs_model_image_size(const struct VitvsModel *model, size_t *out);

// Spectrogram grid (frequency bins by frames) for a signal of `n_samples`.
//
// # Safety
// `n_bins` and `n_frames` must be writable.
enum VitvsStatus vitvs_spectrogram_shape(size_t n_samples, size_t *n_bins, size_t *n_frames);

// Predicted mask on the spectrogram grid. `mask_len` must equal
// `n_bins * n_frames` from [`vitvs_spectrogram_shape`].
//
// # Safety
// `samples` must hold `n` floats and `mask_out` `mask_len` bytes.
enum VitvsStatus vitvs_predict_mask(const struct VitvsModel *model,
                                    const float *samples,
                                    size_t n,
                                    uint32_t sample_rate,
                                    uint8_t *mask_out,
                                    size_t mask_len);

// Denoises `n` samples into `out` (also `n` floats).
//
// # Safety
// `samples` and `out` must each hold `n` floats.
enum VitvsStatus vitvs_denoise(const struct VitvsModel *model,
                               const float *samples,
                               size_t n,
                               uint32_t sample_rate,
                               float *out);

// Applies a caller-supplied spectrogram-grid mask and resynthesizes.
//
// # Safety
// `samples` and `out` must hold `n` floats and `mask` `mask_len` bytes.
enum VitvsStatus vitvs_mask_denoise(const float *samples,
                                    size_t n,
                                    uint32_t sample_rate,
                                    const uint8_t *mask,
                                    size_t mask_len,
                                    float *out);

// Signal-to-distortion ratio in dB of `estimate` against `reference`.
//
// # Safety
// `reference` and `estimate` must hold `n` floats; `out` must be writable.
enum VitvsStatus vitvs_sdr(const float *reference, const float *estimate, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITVS_H */
