#ifndef COMUCO_H
#define COMUCO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ComucoStatus {
  COMUCO_STATUS_OK = 0,
  COMUCO_STATUS_NULL_POINTER = 1,
  COMUCO_STATUS_INVALID_ARGUMENT = 2,
  COMUCO_STATUS_IO = 3,
  // Malformed feature file, manifest or JSON.
  COMUCO_STATUS_FORMAT = 4,
  // Non-finite value during training or evaluation.
  COMUCO_STATUS_NUMERICAL = 5,
  // Internal error; the library caught a panic.
  COMUCO_STATUS_INTERNAL = 6,
} ComucoStatus;

// Trained or freshly initialized adapters with the settings used for fusion.
typedef struct ComucoModel ComucoModel;

// A loaded task: manifest plus normalized features and text embeddings.
typedef struct ComucoTask ComucoTask;

// Training and fusion settings. Obtain defaults from
// [`comuco_config_default`] and override fields as needed.
typedef struct ComucoConfig {
  double alpha;
  double beta;
  double lambda1;
  double lambda2;
  double lambda3;
  double tau;
  double b;
  // Negative selects the default (50, or 300 for cross-domain tasks).
  int64_t epochs;
  double warmup_lr;
  double peak_lr;
  size_t batch_size;
  // Zero selects `4 * dim`.
  size_t hidden_dim;
  double momentum;
  double weight_decay;
} ComucoConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failed call on this thread, or an empty
// string. The pointer stays valid until the next library call on this
// thread.
const char *comuco_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *comuco_version(void);

// Writes the default configuration to `out`.
//
// # Safety
// `out` must be null or point to writable memory for one `ComucoConfig`.
enum ComucoStatus comuco_config_default(struct ComucoConfig *out);

// Loads a task from its manifest JSON; feature paths resolve relative to
// the manifest's directory.
//
// # Safety
// `manifest_path` must be a NUL-terminated string; `out` must be writable.
enum ComucoStatus comuco_task_load(const char *manifest_path, struct ComucoTask **out);

// # Safety
// `task` must be null or a handle from [`comuco_task_load`] not yet freed.
void comuco_task_free(struct ComucoTask *task);

// Number of classes and embedding dimension of a task.
//
// # Safety
// `task` must be a live handle; the out pointers must be writable.
enum ComucoStatus comuco_task_shape(const struct ComucoTask *task,
                                    size_t *num_classes,
                                    size_t *dim);

// Test-split accuracy of the frozen zero-shot classifier.
//
// # Safety
// `task` must be a live handle; `accuracy` must be writable.
enum ComucoStatus comuco_zero_shot_accuracy(const struct ComucoTask *task, double *accuracy);

// Freshly initialized (identity) adapters for `task`.
//
// # Safety
// `task` and `config` must be valid; `out` must be writable.
enum ComucoStatus comuco_model_init(const struct ComucoTask *task,
                                    const struct ComucoConfig *config,
                                    uint64_t seed,
                                    struct ComucoModel **out);

// Samples a `k`-shot episode with `seed`, trains on it and returns the
// model and its test accuracy (`accuracy` may be null).
//
// # Safety
// `task` and `config` must be valid; `out` must be writable.
enum ComucoStatus comuco_train(const struct ComucoTask *task,
                               const struct ComucoConfig *config,
                               size_t k,
                               uint64_t seed,
                               struct ComucoModel **out,
                               double *accuracy);

// Loads adapters saved by [`comuco_model_save`] or the command-line tool.
//
// # Safety
// `path` must be a NUL-terminated string; `config` valid; `out` writable.
enum ComucoStatus comuco_model_load(const char *path,
                                    const struct ComucoConfig *config,
                                    struct ComucoModel **out);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum ComucoStatus comuco_model_save(const struct ComucoModel *model, const char *path);

// # Safety
// `model` must be null or a live handle not yet freed.
void comuco_model_free(struct ComucoModel *model);

// Test-split accuracy of the fused classifier.
//
// # Safety
// `model` and `task` must be live handles; `accuracy` writable.
enum ComucoStatus comuco_model_evaluate(const struct ComucoModel *model,
                                        const struct ComucoTask *task,
                                        double *accuracy);

// Classifies one unit-norm feature of length `dim` against the task's
// class embeddings. When `logits` is non-null, `num_classes` fused logits
// are written there.
//
// # Safety
// `feature` must hold `dim` doubles; `logits`, if non-null, `num_classes`.
enum ComucoStatus comuco_model_predict(const struct ComucoModel *model,
                                       const struct ComucoTask *task,
                                       const double *feature,
                                       size_t dim,
                                       size_t *class_out,
                                       double *logits,
                                       size_t num_classes);

// Jeffreys divergence `KL(p||q) + KL(q||p)` of two interior distributions.
//
// # Safety
// `p` and `q` must each hold `n` doubles; `out` must be writable.
enum ComucoStatus comuco_jeffreys(const double *p, const double *q, size_t n, double *out);

// Fisher-Rao geodesic distance between two distributions.
//
// # Safety
// `p` and `q` must each hold `n` doubles; `out` must be writable.
enum ComucoStatus comuco_fisher_rao(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMUCO_H */
