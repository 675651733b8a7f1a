#ifndef SPLATSTREAM_H
#define SPLATSTREAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_IO = 3,
  SS_STATUS_FORMAT = 4,
  SS_STATUS_VALIDATION = 5,
  SS_STATUS_UNSUPPORTED = 6,
  SS_STATUS_INIT = 7,
  SS_STATUS_FUSION = 8,
  SS_STATUS_EMPTY_BANK = 9,
  SS_STATUS_NUMERIC = 10,
  SS_STATUS_CONFIG = 11,
  SS_STATUS_PANIC = 12,
} SsStatus;

// Memory bank handle.
typedef struct SsBank SsBank;

// Gaussian field handle.
typedef struct SsField SsField;

// Streaming pipeline handle.
typedef struct SsPipeline SsPipeline;

// Camera intrinsics in pixels.
typedef struct SsIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} SsIntrinsics;

// Borrowed view of one observation. `depth` may be null.
typedef struct SsFrame {
  size_t width;
  size_t height;
  // `width * height * 3` values.
  const double *rgb;
  // `width * height` values, nonzero inside the object.
  const uint8_t *mask;
  // `width * height` values or null.
  const double *depth;
} SsFrame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *ss_last_error(void);

// PSNR in dB with peak 1; identical images give 99.
//
// # Safety
// `a` and `b` must point to `width * height * 3` values; `out` must be writable.
enum SsStatus ss_psnr(const double *a, const double *b, size_t width, size_t height, double *out);

// Mean SSIM (11×11 Gaussian window, σ = 1.5). Images must be at least 11×11.
//
// # Safety
// As for [`ss_psnr`].
enum SsStatus ss_ssim(const double *a, const double *b, size_t width, size_t height, double *out);

// Combined score in `[0, 1]`; `lpips` is ignored unless `has_lpips` is nonzero.
double ss_m_avg(double psnr, double ssim, double lpips, int32_t has_lpips);

// # Safety
// `out` must be writable.
enum SsStatus ss_bank_new(size_t feature_dim,
                          size_t tokens_per_view,
                          size_t capacity_tokens,
                          int32_t directional,
                          struct SsBank **out);

// # Safety
// `bank` must come from this library and not be used afterwards.
void ss_bank_free(struct SsBank *bank);

// Number of stored tokens; 0 for a null handle.
//
// # Safety
// `bank` must be null or a live handle.
size_t ss_bank_len(const struct SsBank *bank);

// Writes one view: `keys` and `values` are P×C row-major, `direction` a unit 3-vector.
//
// # Safety
// Buffers must hold the stated number of values; `removed` may be null.
enum SsStatus ss_bank_write(struct SsBank *bank,
                            const double *keys,
                            const double *direction,
                            const double *values,
                            uint64_t t,
                            size_t *removed);

// Both reads for a P×C query; each output receives P×C values. Usage is recorded.
//
// # Safety
// Buffers must hold the stated number of values.
enum SsStatus ss_bank_read(struct SsBank *bank,
                           const double *query,
                           size_t rows,
                           const double *reference_direction,
                           const double *current_direction,
                           double sigma,
                           double *aligned,
                           double *complementary);

// One sparsification pass; stores the number of removed tokens.
//
// # Safety
// `removed` may be null.
enum SsStatus ss_bank_sparsify(struct SsBank *bank, size_t *removed);

// # Safety
// `path` must be a NUL-terminated UTF-8 string.
enum SsStatus ss_bank_save(const struct SsBank *bank, const char *path);

// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum SsStatus ss_bank_load(const char *path, struct SsBank **out);

// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
enum SsStatus ss_field_load(const char *path, struct SsField **out);

// # Safety
// `path` must be a NUL-terminated UTF-8 string.
enum SsStatus ss_field_save(const struct SsField *field, const char *path);

// # Safety
// `field` must be null or a live handle.
size_t ss_field_len(const struct SsField *field);

// # Safety
// `field` must come from this library and not be used afterwards.
void ss_field_free(struct SsField *field);

// Renders `field` with default settings into `rgb` (`width * height * 3` values).
//
// # Safety
// `pose` must hold 16 values and `rgb` the image size.
enum SsStatus ss_render(const struct SsField *field,
                        const double *pose,
                        const struct SsIntrinsics *k,
                        double *rgb);

// Starts a stream from the reference frame. `config_path` may be null for
// defaults, otherwise a TOML or JSON config file.
//
// # Safety
// All pointers must satisfy the layouts documented on their types.
enum SsStatus ss_pipeline_new(const char *config_path,
                              const struct SsFrame *reference,
                              const double *reference_pose,
                              const struct SsIntrinsics *k,
                              struct SsPipeline **out);

// Like [`ss_pipeline_new`] with the default configuration except for the
// memory sizes and patch edge.
//
// # Safety
// As for [`ss_pipeline_new`].
enum SsStatus ss_pipeline_new_sized(size_t feature_dim,
                                    size_t tokens_per_view,
                                    size_t capacity_tokens,
                                    size_t patch_size,
                                    const struct SsFrame *reference,
                                    const double *reference_pose,
                                    const struct SsIntrinsics *k,
                                    struct SsPipeline **out);

// Feeds one frame. On success `field_out` receives a new field handle
// owned by the caller. On failure the pipeline is unchanged.
//
// # Safety
// As for [`ss_pipeline_new`]; `field_out` must be writable.
enum SsStatus ss_pipeline_step(struct SsPipeline *pipeline,
                               const struct SsFrame *f,
                               const double *pose,
                               struct SsField **field_out);

// Renders a field with the pipeline's render settings.
//
// # Safety
// As for [`ss_render`].
enum SsStatus ss_pipeline_render(const struct SsPipeline *pipeline,
                                 const struct SsField *field,
                                 const double *pose,
                                 double *rgb);

// Frames processed since init; 0 for a null handle.
//
// # Safety
// `pipeline` must be null or a live handle.
uint64_t ss_pipeline_t(const struct SsPipeline *pipeline);

// Current number of memory tokens; 0 for a null handle.
//
// # Safety
// `pipeline` must be null or a live handle.
size_t ss_pipeline_bank_len(const struct SsPipeline *pipeline);

// # Safety
// `pipeline` must come from this library and not be used afterwards.
void ss_pipeline_free(struct SsPipeline *pipeline);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATSTREAM_H */
