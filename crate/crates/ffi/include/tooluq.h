#ifndef TOOLUQ_H
#define TOOLUQ_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TuqStatus {
  TUQ_STATUS_OK = 0,
  TUQ_STATUS_CONFIG_ERROR = 1,
  TUQ_STATUS_UPSTREAM_ERROR = 2,
  TUQ_STATUS_UNDEFINED_AUROC = 3,
  TUQ_STATUS_INVALID_ARGUMENT = 4,
  TUQ_STATUS_NULL_POINTER = 5,
  TUQ_STATUS_PANIC = 6,
} TuqStatus;

typedef enum TuqReportFormat {
  TUQ_REPORT_FORMAT_CSV = 0,
  TUQ_REPORT_FORMAT_JSONL = 1,
  TUQ_REPORT_FORMAT_TEXT = 2,
} TuqReportFormat;

/*
 Opaque prepared experiment.
 */
typedef struct TuqExperiment TuqExperiment;

/*
 Opaque result table.
 */
typedef struct TuqResultTable TuqResultTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copy of the last error message on this thread, or null if none.
 */
char *tuq_last_error(void);

/*
 Library version as a static string; do not free.
 */
const char *tuq_version(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void tuq_string_free(char *s);

/*
 Shannon entropy in nats of a probability vector.

 # Safety
 `probs` must point to `n` readable doubles; `out` must be writable.
 */
enum TuqStatus tuq_entropy(const double *probs, size_t n, double *out);

/*
 Monte Carlo predictive entropy `-mean(log p)` from sequence log-probs.

 # Safety
 `log_probs` must point to `n` readable doubles; `out` must be writable.
 */
enum TuqStatus tuq_mc_predictive_entropy(const double *log_probs, size_t n, double *out);

/*
 Differential entropy of a diagonal Gaussian with the given variances.

 # Safety
 `variances` must point to `n` readable doubles; `out` must be writable.
 */
enum TuqStatus tuq_gaussian_entropy(const double *variances, size_t n, double *out);

/*
 STA_P from the answer entropy given the tool output and the tool entropy.

 # Safety
 `out` must be writable.
 */
enum TuqStatus tuq_sta(double h_answer, double h_tool, double *out);

/*
 AUROC of uncertainty scores against correctness flags (nonzero = correct).
 Returns `UndefinedAuroc` when all flags agree.

 # Safety
 `uncertainties` and `correct` must point to `n` readable elements;
 `out` must be writable.
 */
enum TuqStatus tuq_auroc(const double *uncertainties,
                         const uint8_t *correct,
                         size_t n,
                         double *out);

/*
 Parses and prepares an experiment from TOML config text.

 # Safety
 `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum TuqStatus tuq_experiment_new(const char *config_toml, struct TuqExperiment **out);

/*
 # Safety
 `exp` must come from [`tuq_experiment_new`] and not be freed twice.
 */
void tuq_experiment_free(struct TuqExperiment *exp);

/*
 Runs the full protocol. A table is produced even when AUROCs are
 undefined; use [`tuq_result_auroc`] to inspect them.

 # Safety
 `exp` must be a live handle; `out` must be writable.
 */
enum TuqStatus tuq_experiment_run(const struct TuqExperiment *exp, struct TuqResultTable **out);

/*
 # Safety
 `table` must come from [`tuq_experiment_run`] and not be freed twice.
 */
void tuq_result_free(struct TuqResultTable *table);

/*
 AUROC of a metric by column name, e.g. "STA_S" or "Tool Entropy".

 # Safety
 `table` must be a live handle; `metric` NUL-terminated; `out` writable.
 */
enum TuqStatus tuq_result_auroc(const struct TuqResultTable *table,
                                const char *metric,
                                double *out);

/*
 Number of scored eval questions.

 # Safety
 `table` must be a live handle; `out` writable.
 */
enum TuqStatus tuq_result_question_count(const struct TuqResultTable *table, size_t *out);

/*
 Config hash of the run as a caller-owned string.

 # Safety
 `table` must be a live handle; `out` writable.
 */
enum TuqStatus tuq_result_config_hash(const struct TuqResultTable *table, char **out);

/*
 Writes the table as a report file.

 # Safety
 `table` must be a live handle; `path` NUL-terminated.
 */
enum TuqStatus tuq_result_write(const struct TuqResultTable *table,
                                enum TuqReportFormat format,
                                const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOOLUQ_H */
