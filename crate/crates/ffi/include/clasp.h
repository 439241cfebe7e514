#ifndef CLASP_H
#define CLASP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClaspStatus {
  CLASP_STATUS_OK = 0,
  CLASP_STATUS_NULL_POINTER = 1,
  CLASP_STATUS_INVALID_ARGUMENT = 2,
  CLASP_STATUS_IO = 3,
  CLASP_STATUS_CHECKSUM = 4,
  CLASP_STATUS_STRUCTURAL = 5,
  CLASP_STATUS_NUMERIC = 6,
  CLASP_STATUS_INTERNAL = 7,
} ClaspStatus;

// Opaque trainer handle.
typedef struct ClaspTrainer ClaspTrainer;

// Loss terms of one training step.
typedef struct ClaspLoss {
  double dino;
  double part;
  double attribute;
  double balancing;
  double total;
} ClaspLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length in bytes excluding the terminator.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t clasp_last_error_message(char *buf, size_t len);

// Argmax over part similarity scores. `out_id` is 1-based.
//
// # Safety
// `scores` must hold `n` values; the outputs must be valid pointers.
enum ClaspStatus clasp_select_part_label(const double *scores,
                                         size_t n,
                                         uint8_t *out_id,
                                         double *out_score);

// Argmax over one attribute's label scores; `*out_index` is -1 when the
// best score does not exceed `threshold`.
//
// # Safety
// `scores` must hold `n` values; the outputs must be valid pointers.
enum ClaspStatus clasp_select_attribute_label(const double *scores,
                                              size_t n,
                                              double threshold,
                                              int64_t *out_index,
                                              double *out_score);

// Squared coefficient of variation.
//
// # Safety
// `values` must hold `n` values; `out_value` must be valid.
enum ClaspStatus clasp_cv2(const double *values, size_t n, double *out_value);

// Load-balancing loss of one stage from a row-major `[b, n]` gate matrix.
// Nonzero entries count as selected.
//
// # Safety
// `gates` must hold `b * n` values; `out_value` must be valid.
enum ClaspStatus clasp_balancing_loss(const double *gates, size_t b, size_t n, double *out_value);

// Gradient conflict ratio. `gradients` is `[tasks][layers][dim]`, row-major,
// with every layer flattened to `dim` values.
//
// # Safety
// `gradients` must hold `tasks * layers * dim` values; `out_value` must be
// valid.
enum ClaspStatus clasp_conflict_ratio(const double *gradients,
                                      size_t tasks,
                                      size_t layers,
                                      size_t dim,
                                      double *out_value);

// Expert activation divergence between two length-`n` profiles.
//
// # Safety
// `p_i` and `p_j` must hold `n` values; `out_value` must be valid.
enum ClaspStatus clasp_expert_activation_divergence(const double *p_i,
                                                    const double *p_j,
                                                    size_t n,
                                                    double *out_value);

// # Safety
// `out_value` must be valid.
enum ClaspStatus clasp_harmonic_mean(double a, double b, double *out_value);

// Creates a trainer from a JSON config (null for defaults).
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out_trainer` must
// be valid.
enum ClaspStatus clasp_trainer_new(const char *config_json, struct ClaspTrainer **out_trainer);

// Restores a trainer from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_trainer` must be valid.
enum ClaspStatus clasp_trainer_load(const char *path, struct ClaspTrainer **out_trainer);

// Runs one optimization step at the scheduled learning rate.
//
// # Safety
// `trainer` must come from this library; `out_loss` may be null.
enum ClaspStatus clasp_trainer_step(struct ClaspTrainer *trainer, struct ClaspLoss *out_loss);

// Number of completed steps.
//
// # Safety
// `trainer` must come from this library; `out_step` must be valid.
enum ClaspStatus clasp_trainer_step_count(const struct ClaspTrainer *trainer, uint64_t *out_step);

// # Safety
// `trainer` must come from this library; `path` must be a NUL-terminated
// string.
enum ClaspStatus clasp_trainer_save(const struct ClaspTrainer *trainer, const char *path);

// Releases a trainer. Null is ignored.
//
// # Safety
// `trainer` must be null or come from this library and not be used again.
void clasp_trainer_free(struct ClaspTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLASP_H */
