#ifndef LONGSTYLE_H
#define LONGSTYLE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum LsStatus {
  LsStatus_Ok = 0,
  LsStatus_NullPointer = 1,
  LsStatus_InvalidArgument = 2,
  LsStatus_Io = 3,
  LsStatus_Runtime = 4,
  LsStatus_Panic = 5,
} LsStatus;

/**
 * Opaque model handle.
 */
typedef struct LsModel LsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *ls_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ls_version(void);

/**
 * Loads a checkpoint and the corpus vocabulary (`vocab.json`, `styles.json`
 * in `corpus_dir`).
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum LsStatus ls_model_load(const char *checkpoint, const char *corpus_dir, struct LsModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ls_model_load`] and not be used afterwards.
 */
void ls_model_free(struct LsModel *model);

/**
 * Number of styles known to the model.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
uintptr_t ls_model_num_styles(const struct LsModel *model);

/**
 * Transfers `text` written in `source_style` to `target_style`. The result
 * is written to `out` and must be released with [`ls_string_free`].
 *
 * # Safety
 * `model` must be a live handle; strings must be NUL-terminated; `out` must be writable.
 */
enum LsStatus ls_model_transfer(const struct LsModel *model,
                                const char *text,
                                const char *source_style,
                                const char *target_style,
                                char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void ls_string_free(char *s);

/**
 * `G-BL = sqrt(acc * (bleu1 + bleu2) / 2)` and `G-BS = sqrt(acc * bs_f1)`.
 *
 * # Safety
 * Output pointers must be writable.
 */
enum LsStatus ls_overall_metrics(double acc,
                                 double bleu1,
                                 double bleu2,
                                 double bs_f1,
                                 double *out_g_bl,
                                 double *out_g_bs);

/**
 * Corpus BLEU-n over `count` token-id sequence pairs.
 *
 * # Safety
 * `cands[i]` must point to `cand_lens[i]` ids and `refs[i]` to `ref_lens[i]`
 * ids for every `i < count`; `out` must be writable.
 */
enum LsStatus ls_bleu(const uint32_t *const *cands,
                      const uintptr_t *cand_lens,
                      const uint32_t *const *refs,
                      const uintptr_t *ref_lens,
                      uintptr_t count,
                      uintptr_t n,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LONGSTYLE_H */
