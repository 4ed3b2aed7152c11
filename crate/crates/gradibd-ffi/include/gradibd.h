#ifndef GRADIBD_H
#define GRADIBD_H

/* Generated by cbindgen from the gradibd-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a fallible call. Anything other than `Ok` leaves a
 * description in `gradibd_last_error` for the calling thread.
 */
typedef enum GradibdStatus {
  GRADIBD_STATUS_OK = 0,
  GRADIBD_STATUS_NULL_ARGUMENT = 1,
  GRADIBD_STATUS_INVALID_UTF8 = 2,
  GRADIBD_STATUS_IO = 3,
  GRADIBD_STATUS_PARSE = 4,
  GRADIBD_STATUS_MODEL = 5,
  GRADIBD_STATUS_OUT_OF_RANGE = 6,
  GRADIBD_STATUS_PANIC = 7,
} GradibdStatus;

/**
 * A loaded patient cohort.
 */
typedef struct GradibdCohort GradibdCohort;

/**
 * A trained model restored from a checkpoint file.
 */
typedef struct GradibdModel GradibdModel;

/**
 * A diagnosis-code vocabulary.
 */
typedef struct GradibdVocab GradibdVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *gradibd_version(void);

/**
 * Returns the message left by the most recent failing call on this thread,
 * or an empty string when no call has failed. The pointer stays valid until
 * the next failing gradibd call on the same thread.
 */
const char *gradibd_last_error(void);

/**
 * Loads a cohort from a JSON-lines file and stores the new handle in
 * `out`. The handle must be released with `gradibd_cohort_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GradibdStatus gradibd_cohort_load(const char *path, struct GradibdCohort **out);

/**
 * Returns the number of patients in the cohort, or 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or a live handle from `gradibd_cohort_load`.
 */
uintptr_t gradibd_cohort_len(const struct GradibdCohort *cohort);

/**
 * Writes patient `index`'s label (0 or 1) to `out`.
 *
 * # Safety
 * `cohort` must be a live handle and `out` a valid pointer.
 */
enum GradibdStatus gradibd_cohort_label(const struct GradibdCohort *cohort,
                                        uintptr_t index,
                                        uint8_t *out);

/**
 * Returns patient `index`'s id as a newly allocated string, or null on
 * failure. Release the result with `gradibd_string_free`.
 *
 * # Safety
 * `cohort` must be a live handle from `gradibd_cohort_load`.
 */
char *gradibd_cohort_patient_id(const struct GradibdCohort *cohort, uintptr_t index);

/**
 * Releases a cohort handle. Passing null is a no-op.
 *
 * # Safety
 * `cohort` must be null or a handle not yet freed.
 */
void gradibd_cohort_free(struct GradibdCohort *cohort);

/**
 * Loads a vocabulary from a plain-text file (one code per line) and stores
 * the new handle in `out`. Release with `gradibd_vocab_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GradibdStatus gradibd_vocab_load(const char *path, struct GradibdVocab **out);

/**
 * Builds a vocabulary from every code observed in the cohort and stores the
 * new handle in `out`. Release with `gradibd_vocab_free`.
 *
 * # Safety
 * `cohort` must be a live handle and `out` a valid pointer.
 */
enum GradibdStatus gradibd_vocab_from_cohort(const struct GradibdCohort *cohort,
                                             struct GradibdVocab **out);

/**
 * Returns the number of codes in the vocabulary (unknown slot included),
 * or 0 for a null handle.
 *
 * # Safety
 * `vocab` must be null or a live handle.
 */
uintptr_t gradibd_vocab_len(const struct GradibdVocab *vocab);

/**
 * Releases a vocabulary handle. Passing null is a no-op.
 *
 * # Safety
 * `vocab` must be null or a handle not yet freed.
 */
void gradibd_vocab_free(struct GradibdVocab *vocab);

/**
 * Loads a trained model from a checkpoint file and stores the new handle
 * in `out`. Release with `gradibd_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum GradibdStatus gradibd_model_load(const char *path, struct GradibdModel **out);

/**
 * Returns the number of trainable parameters in the model, or 0 for a
 * null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t gradibd_model_n_params(const struct GradibdModel *model);

/**
 * Scores patient `index`: encodes the trajectory with the model's stored
 * bucket width, runs the forward pass, and writes the risk probability in
 * (0, 1) to `out`. The vocabulary must be the one the model was trained
 * with (same size).
 *
 * # Safety
 * All handles must be live and `out` a valid pointer.
 */
enum GradibdStatus gradibd_model_score(const struct GradibdModel *model,
                                       const struct GradibdVocab *vocab,
                                       const struct GradibdCohort *cohort,
                                       uintptr_t index,
                                       double *out);

/**
 * Scores every patient in the cohort into `out`, which must hold exactly
 * `len == gradibd_cohort_len(cohort)` doubles.
 *
 * # Safety
 * All handles must be live and `out` must point to `len` writable doubles.
 */
enum GradibdStatus gradibd_model_score_all(const struct GradibdModel *model,
                                           const struct GradibdVocab *vocab,
                                           const struct GradibdCohort *cohort,
                                           double *out,
                                           uintptr_t len);

/**
 * Releases a model handle. Passing null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void gradibd_model_free(struct GradibdModel *model);

/**
 * Releases a string returned by `gradibd_cohort_patient_id`. Passing null
 * is a no-op.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void gradibd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADIBD_H */
