#ifndef LOAT_H
#define LOAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LoatStatus {
  LOAT_STATUS_OK = 0,
  LOAT_STATUS_NULL_POINTER = 1,
  LOAT_STATUS_INVALID_ARGUMENT = 2,
  LOAT_STATUS_SHAPE = 3,
  LOAT_STATUS_FORMAT = 4,
  LOAT_STATUS_IO = 5,
  LOAT_STATUS_NUMERIC = 6,
  LOAT_STATUS_BUFFER_TOO_SMALL = 7,
  LOAT_STATUS_PANIC = 8,
  LOAT_STATUS_INTERNAL = 9,
} LoatStatus;

/*
 Opaque handle to a trained or freshly initialised MLP.
 */
typedef struct LoatModel LoatModel;

/*
 Radius estimates; undefined subset radii are NaN.
 */
typedef struct LoatRadius {
  double gamma_hat;
  double gamma_hat_c;
  double gamma_hat_m;
  size_t n_correct;
  size_t n_wrong;
} LoatRadius;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into this library from the same thread.
 */
const char *loat_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *loat_version(void);

/*
 Initialises an MLP with layer widths `[d, H_1, …, K]`. `init_scale <= 0`
 selects He scaling, otherwise a fixed standard deviation.

 # Safety
 `widths` must point to `n_widths` values and `out` to writable storage.
 */
enum LoatStatus loat_model_init(const size_t *widths,
                                size_t n_widths,
                                uint64_t seed,
                                double init_scale,
                                struct LoatModel **out);

/*
 Loads a checkpoint file.

 # Safety
 `file` must be a NUL-terminated string and `out` writable.
 */
enum LoatStatus loat_model_load(const char *file, struct LoatModel **out);

/*
 # Safety
 `m` must come from this library; `file` must be NUL-terminated.
 */
enum LoatStatus loat_model_save(const struct LoatModel *m, const char *file);

/*
 Releases a model. Null is ignored.

 # Safety
 `m` must come from this library and not be used afterwards.
 */
void loat_model_free(struct LoatModel *m);

/*
 Writes input width, output width and number of weight layers.

 # Safety
 `m` must come from this library; the out pointers may be null.
 */
enum LoatStatus loat_model_shape(const struct LoatModel *m,
                                 size_t *input_dim,
                                 size_t *output_dim,
                                 size_t *depth);

/*
 Logits for `n` row-major inputs of the model's input width.

 # Safety
 `inputs` holds `n·d` values; `out` has room for `out_len` values.
 */
enum LoatStatus loat_model_forward(const struct LoatModel *m,
                                   const double *inputs,
                                   size_t n,
                                   double *out,
                                   size_t out_len);

/*
 Logit-gap radius estimates over `n` rows of `classes` logits.

 # Safety
 `logits` holds `n·classes` values, `labels` holds `n`; `out` is writable.
 */
enum LoatStatus loat_radius(const double *logit_values,
                            const uint32_t *labels,
                            size_t n,
                            size_t classes,
                            struct LoatRadius *out);

/*
 Lower and upper complexity bounds from subset counts and radii.

 # Safety
 `lower` and `upper` must be writable.
 */
enum LoatStatus loat_bounds(size_t n_correct,
                            size_t n_wrong,
                            size_t classes,
                            double gamma_hat_m,
                            double gamma_ce,
                            double *lower,
                            double *upper);

/*
 PGD adversarial inputs. `norm` is 0 for ℓ∞ and 2 for ℓ2.

 # Safety
 `inputs` holds `n·d` values, `labels` holds `n`; `out` has room for
 `out_len` values.
 */
enum LoatStatus loat_pgd(const struct LoatModel *m,
                         const double *inputs,
                         const uint32_t *labels,
                         size_t n,
                         uint32_t norm,
                         double epsilon,
                         double step_size,
                         size_t steps,
                         bool random_start,
                         bool track_best,
                         uint64_t seed,
                         double *out,
                         size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOAT_H */
