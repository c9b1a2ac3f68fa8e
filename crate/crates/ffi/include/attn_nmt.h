#ifndef ATTN_NMT_H
#define ATTN_NMT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AnmtStatus {
  ANMT_STATUS_OK = 0,
  ANMT_STATUS_NULL_ARGUMENT = 1,
  ANMT_STATUS_INVALID_UTF8 = 2,
  ANMT_STATUS_IO = 3,
  /**
   * Malformed or inconsistent input data.
   */
  ANMT_STATUS_DATA = 4,
  /**
   * Unreadable, corrupt or mismatched checkpoint.
   */
  ANMT_STATUS_CHECKPOINT = 5,
  /**
   * The sentence had no tokens.
   */
  ANMT_STATUS_EMPTY_INPUT = 6,
  /**
   * An internal panic was caught at the boundary.
   */
  ANMT_STATUS_PANIC = 7,
} AnmtStatus;

/**
 * A loaded model with its vocabularies and decoding settings.
 */
typedef struct AnmtTranslator AnmtTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint and the vocabularies it was trained with.
 *
 * `beam_width` 0 selects the default width. On success `*out` owns a new
 * translator.
 *
 * # Safety
 * The path arguments are NUL-terminated strings and `out` points to
 * writable storage for one pointer.
 */
enum AnmtStatus anmt_translator_load(const char *model_path,
                                     const char *src_vocab_path,
                                     const char *tgt_vocab_path,
                                     size_t beam_width,
                                     struct AnmtTranslator **out);

/**
 * Frees a translator. Null is ignored.
 *
 * # Safety
 * `translator` is null or was returned by [`anmt_translator_load`] and not
 * yet freed.
 */
void anmt_translator_free(struct AnmtTranslator *translator);

/**
 * Translates one sentence. On success `*out` owns the translation, to be
 * released with [`anmt_string_free`].
 *
 * # Safety
 * `translator` is a live translator, `text` a NUL-terminated string and
 * `out` points to writable storage for one pointer.
 */
enum AnmtStatus anmt_translate(const struct AnmtTranslator *translator,
                               const char *text,
                               char **out);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void anmt_string_free(char *s);

/**
 * Corpus BLEU in [0, 1] of newline-separated candidate sentences against
 * the same number of reference sentences.
 *
 * # Safety
 * `candidates` and `references` are NUL-terminated strings and `out` points
 * to a writable double.
 */
enum AnmtStatus anmt_bleu(const char *candidates, const char *references, double *out);

/**
 * Corpus TER: total word edits over total reference words.
 *
 * # Safety
 * As for [`anmt_bleu`].
 */
enum AnmtStatus anmt_ter(const char *candidates, const char *references, double *out);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next library call on the same thread.
 */
const char *anmt_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTN_NMT_H */
