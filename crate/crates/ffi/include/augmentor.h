#ifndef AUGMENTOR_H
#define AUGMENTOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AugStatus {
  AUG_STATUS_OK = 0,
  AUG_STATUS_NULL_POINTER = 1,
  AUG_STATUS_INVALID_ARGUMENT = 2,
  AUG_STATUS_IO = 3,
  AUG_STATUS_PARSE = 4,
  AUG_STATUS_SINGLE_CLASS = 5,
  AUG_STATUS_TRAINING = 6,
  AUG_STATUS_PANIC = 7,
} AugStatus;

// Loaded corpus of human and synthetic samples.
typedef struct AugCorpus AugCorpus;

// Trained hashed-feature logistic model.
typedef struct AugModel AugModel;

// Bootstrap AUC estimate with its percentile interval.
typedef struct AugEvalResult {
  double auc;
  double ci_low;
  double ci_high;
  size_t n_resamples;
  double ci_level;
  uint64_t seed;
} AugEvalResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *aug_last_error(void);

// Library version as a static NUL-terminated string.
const char *aug_version(void);

// Rank-based ROC AUC of `scores` against 0/1 `labels`, both of length `n`.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements; `out` must be
// writable.
enum AugStatus aug_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Full-sample AUC with a class-stratified percentile bootstrap interval.
//
// # Safety
// As for `aug_roc_auc`.
enum AugStatus aug_bootstrap_auc(const double *scores,
                                 const uint8_t *labels,
                                 size_t n,
                                 size_t n_resamples,
                                 double ci_level,
                                 uint64_t seed,
                                 struct AugEvalResult *out);

// Extracts the binary score from a grading reply.
//
// # Safety
// `raw` must be a NUL-terminated string; `out` must be writable.
enum AugStatus aug_parse_score(const char *raw, uint8_t *out);

// Loads a corpus file; `.csv` files are read as CSV, anything else as JSONL.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AugStatus aug_corpus_load(const char *path, struct AugCorpus **out);

// Sizes of the human training and validation splits.
//
// # Safety
// `corpus` must come from `aug_corpus_load`; the out pointers must be
// writable.
enum AugStatus aug_corpus_sizes(const struct AugCorpus *corpus,
                                size_t *human_train,
                                size_t *validation);

// # Safety
// `corpus` must come from `aug_corpus_load` and not be used afterwards.
// NULL is ignored.
void aug_corpus_free(struct AugCorpus *corpus);

// Trains the native model on the human split until saturation and scores
// the validation split. `eval` may be NULL.
//
// # Safety
// `corpus` must come from `aug_corpus_load`; `out` must be writable.
enum AugStatus aug_train_baseline(const struct AugCorpus *corpus,
                                  uint64_t seed,
                                  struct AugModel **out,
                                  struct AugEvalResult *eval);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AugStatus aug_model_load(const char *path, struct AugModel **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum AugStatus aug_model_save(const struct AugModel *model, const char *path);

// Probability that `text` belongs to class 1.
//
// # Safety
// `model` must be a live handle; `text` a NUL-terminated string; `out`
// writable.
enum AugStatus aug_model_predict(const struct AugModel *model, const char *text, double *out);

// # Safety
// `model` must be a live handle not used afterwards. NULL is ignored.
void aug_model_free(struct AugModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUGMENTOR_H */
