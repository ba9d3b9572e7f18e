#ifndef FOURS_H
#define FOURS_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum FoursStatus {
  FOURS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FOURS_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  FOURS_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid input, specification or configuration.
   */
  FOURS_STATUS_INVALID = 3,
  /**
   * A required upstream artifact is missing.
   */
  FOURS_STATUS_MISSING_ARTIFACT = 4,
  /**
   * Numerical failure (root bracketing, non-finite values).
   */
  FOURS_STATUS_NUMERICAL = 5,
  /**
   * File-system error.
   */
  FOURS_STATUS_IO = 6,
  /**
   * Malformed JSON.
   */
  FOURS_STATUS_JSON = 7,
  /**
   * An output buffer is too small.
   */
  FOURS_STATUS_BUFFER_TOO_SMALL = 8,
  /**
   * A fit finished without meeting the convergence criteria.
   */
  FOURS_STATUS_NOT_CONVERGED = 9,
  /**
   * Internal error; the library state is still usable.
   */
  FOURS_STATUS_PANIC = 10,
} FoursStatus;

/**
 * Cohort dataset.
 */
typedef struct FoursCohort FoursCohort;

/**
 * Fitted sequencing (joint latent process) model of one subdimension.
 */
typedef struct FoursSequenceFit FoursSequenceFit;

/**
 * Fitted staging model of one subdimension.
 */
typedef struct FoursStagingFit FoursStagingFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *fours_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *fours_last_error_message(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or a string returned by this library and not yet released.
 */
void fours_string_free(char *s);

/**
 * Load a cohort from visit and event CSV files. `schema_json` maps columns
 * to roles (the `schema.json` written by `simulate` is an example).
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum FoursStatus fours_cohort_load(const char *visits_path,
                                   const char *events_path,
                                   const char *schema_json,
                                   struct FoursCohort **out);

/**
 * Simulate a cohort from a JSON scenario. The true values are discarded.
 *
 * # Safety
 * `scenario_json` is null or NUL-terminated; `out` is writable.
 */
enum FoursStatus fours_cohort_simulate(const char *scenario_json, struct FoursCohort **out);

/**
 * Number of patients in the cohort.
 *
 * # Safety
 * `cohort` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_cohort_n_patients(const struct FoursCohort *cohort, size_t *out);

/**
 * # Safety
 * `cohort` is null or a live handle, which is invalid afterwards.
 */
void fours_cohort_free(struct FoursCohort *cohort);

/**
 * Fit the sequencing model described by `spec_json`. A fit that does not
 * converge is still returned (status `Ok`); query it with
 * [`fours_sequence_fit_converged`].
 *
 * # Safety
 * `cohort` is null or a live handle; `spec_json` is null or NUL-terminated;
 * `out` is writable.
 */
enum FoursStatus fours_sequence_fit(const struct FoursCohort *cohort,
                                    const char *spec_json,
                                    struct FoursSequenceFit **out);

/**
 * Restore a sequencing fit from its JSON form (plain or a `fours` artifact).
 *
 * # Safety
 * `json` is null or NUL-terminated; `out` is writable.
 */
enum FoursStatus fours_sequence_fit_from_json(const char *json, struct FoursSequenceFit **out);

/**
 * JSON form of the fit; release with [`fours_string_free`].
 *
 * # Safety
 * `fit` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_sequence_fit_to_json(const struct FoursSequenceFit *fit, char **out);

/**
 * # Safety
 * `fit` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_sequence_fit_converged(const struct FoursSequenceFit *fit, bool *out);

/**
 * Number of items of the fitted subdimension.
 *
 * # Safety
 * `fit` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_sequence_fit_n_items(const struct FoursSequenceFit *fit, size_t *out);

/**
 * Level probabilities `P(Y = 0..=M | latent = delta)` of item `item`
 * (0-based) written to `probs`, which holds `len >= M + 1` values. The
 * number of levels is written to `n_levels` when it is not null, also when
 * the buffer is too small.
 *
 * # Safety
 * `fit` is null or a live handle; `probs` is null or holds `len` values;
 * `n_levels` is null or writable.
 */
enum FoursStatus fours_item_probabilities(const struct FoursSequenceFit *fit,
                                          size_t item,
                                          double delta,
                                          double *probs,
                                          size_t len,
                                          size_t *n_levels);

/**
 * # Safety
 * `fit` is null or a live handle, which is invalid afterwards.
 */
void fours_sequence_fit_free(struct FoursSequenceFit *fit);

/**
 * Fit the staging model described by `spec_json`. Non-converged fits are
 * returned as with [`fours_sequence_fit`].
 *
 * # Safety
 * `cohort` is null or a live handle; `spec_json` is null or NUL-terminated;
 * `out` is writable.
 */
enum FoursStatus fours_staging_fit(const struct FoursCohort *cohort,
                                   const char *spec_json,
                                   struct FoursStagingFit **out);

/**
 * # Safety
 * `json` is null or NUL-terminated; `out` is writable.
 */
enum FoursStatus fours_staging_fit_from_json(const char *json, struct FoursStagingFit **out);

/**
 * # Safety
 * `fit` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_staging_fit_to_json(const struct FoursStagingFit *fit, char **out);

/**
 * # Safety
 * `fit` is null or a live handle; `out` is writable.
 */
enum FoursStatus fours_staging_fit_converged(const struct FoursStagingFit *fit, bool *out);

/**
 * # Safety
 * `fit` is null or a live handle, which is invalid afterwards.
 */
void fours_staging_fit_free(struct FoursStagingFit *fit);

/**
 * Project the stages onto the latent scale of `seq` and return the
 * stage-specific item information table as JSON.
 *
 * # Safety
 * Handles are null or live; `out` is writable.
 */
enum FoursStatus fours_information_table(const struct FoursSequenceFit *seq,
                                         const struct FoursStagingFit *stg,
                                         size_t mc_draws,
                                         char **out);

/**
 * Run a pipeline command (`structure`, `sequence`, `stage`, `select`,
 * `simulate` or `report`) as the command-line tool would. `config_path`
 * may be null; `out_dir` null keeps the configured directory. A run whose
 * fits do not converge returns `NotConverged` with its artifacts written.
 *
 * # Safety
 * String arguments are null or NUL-terminated.
 */
enum FoursStatus fours_run(const char *command, const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOURS_H */
