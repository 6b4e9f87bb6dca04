#ifndef MSGCA_H
#define MSGCA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Split selector for per-part calls.
 */
#define MSGCA_PART_TRAIN 0

#define MSGCA_PART_VALID 1

#define MSGCA_PART_TEST 2

/**
 * Result of every fallible call.
 */
typedef enum MsgcaStatus {
  MSGCA_STATUS_OK = 0,
  MSGCA_STATUS_NULL_ARGUMENT = 1,
  MSGCA_STATUS_INVALID_ARGUMENT = 2,
  MSGCA_STATUS_CONFIG = 3,
  MSGCA_STATUS_DATA = 4,
  MSGCA_STATUS_NUMERIC = 5,
  MSGCA_STATUS_CHECKPOINT = 6,
  MSGCA_STATUS_IO = 7,
  MSGCA_STATUS_PANIC = 8,
} MsgcaStatus;

/**
 * A loaded or generated dataset with its chronological split.
 */
typedef struct MsgcaDataset MsgcaDataset;

/**
 * A trained model with its training state.
 */
typedef struct MsgcaModel MsgcaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *msgca_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next `msgca_*` call on the same thread.
 */
const char *msgca_last_error(void);

/**
 * Multiclass MCC of a row-major `k x k` confusion matrix (rows are true
 * classes).
 *
 * # Safety
 * `counts` must point to `k * k` readable values and `out` to one
 * writable double.
 */
enum MsgcaStatus msgca_mcc(const uint64_t *counts, size_t k, double *out);

/**
 * Generates a synthetic dataset. `options_json` may set `ws`, `labels`,
 * `transform`, `split` and `synth` (a synthetic-data config).
 *
 * # Safety
 * `options_json` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum MsgcaStatus msgca_dataset_synth(const char *options_json, struct MsgcaDataset **out);

/**
 * Loads `prices.csv`, `documents.jsonl`, `embeddings.jsonl` and `graph.tsv`
 * from `dir`. Options as for [`msgca_dataset_synth`]; `synth` is ignored.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum MsgcaStatus msgca_dataset_load(const char *dir,
                                    const char *options_json,
                                    struct MsgcaDataset **out);

/**
 * Number of samples in one split part.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` writable.
 */
enum MsgcaStatus msgca_dataset_len(const struct MsgcaDataset *ds, int32_t part, size_t *out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void msgca_dataset_free(struct MsgcaDataset *ds);

/**
 * Trains on `ds` with a JSON training config (keys of the Rust
 * `TrainConfig`, the network shape under `model`). When the dataset
 * carries document embeddings, their width replaces `model.doc_dim`.
 *
 * # Safety
 * `ds` must be a live handle, `config_json` null or NUL-terminated, and
 * `out` writable.
 */
enum MsgcaStatus msgca_train(const struct MsgcaDataset *ds,
                             const char *config_json,
                             struct MsgcaModel **out);

/**
 * Accuracy and MCC of the model on one split part.
 *
 * # Safety
 * Handles must be live; `acc` and `mcc_out` writable.
 */
enum MsgcaStatus msgca_evaluate(const struct MsgcaModel *model,
                                const struct MsgcaDataset *ds,
                                int32_t part,
                                double *acc,
                                double *mcc_out);

/**
 * Class probabilities (down, flat, up) for every sample of one split
 * part, row-major into `out`, which must hold `len = 3 * n` doubles.
 *
 * # Safety
 * Handles must be live and `out` must hold `len` writable doubles.
 */
enum MsgcaStatus msgca_predict_proba(const struct MsgcaModel *model,
                                     const struct MsgcaDataset *ds,
                                     int32_t part,
                                     double *out,
                                     size_t len);

/**
 * Writes the model's training state to `path`. Only models returned by
 * [`msgca_train`] or [`msgca_checkpoint_load`] carry one.
 *
 * # Safety
 * `model` must be live and `path` NUL-terminated.
 */
enum MsgcaStatus msgca_checkpoint_save(const struct MsgcaModel *model, const char *path);

/**
 * Loads a checkpoint; the model uses its best-validation weights.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum MsgcaStatus msgca_checkpoint_load(const char *path, struct MsgcaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void msgca_model_free(struct MsgcaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSGCA_H */
