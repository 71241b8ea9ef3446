#ifndef TATTN_H
#define TATTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TattnStatus {
  TATTN_STATUS_OK = 0,
  TATTN_STATUS_NULL_POINTER = 1,
  TATTN_STATUS_INVALID_ARGUMENT = 2,
  TATTN_STATUS_IO = 3,
  TATTN_STATUS_PARSE = 4,
  TATTN_STATUS_CHECKPOINT = 5,
  TATTN_STATUS_CONFIG = 6,
  TATTN_STATUS_NUMERIC = 7,
  TATTN_STATUS_INTERNAL = 8,
} TattnStatus;

// A loaded model with its vocabularies and decoding settings.
typedef struct TattnTranslator TattnTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. Owned by the
// library and valid until the next failing call on this thread.
const char *tattn_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void tattn_string_free(char *s);

// Loads a checkpoint and its vocabulary files.
//
// # Safety
// Path arguments must be NUL-terminated strings; `out` must be writable.
enum TattnStatus tattn_translator_open(const char *checkpoint,
                                       const char *src_vocab,
                                       const char *tgt_vocab,
                                       struct TattnTranslator **out);

// Sets beam width, length normalization (0/1) and the maximum output
// length (0 means twice the source length plus five).
//
// # Safety
// `tr` must be a live handle from [`tattn_translator_open`].
enum TattnStatus tattn_translator_set_decoding(struct TattnTranslator *tr,
                                               size_t beam,
                                               int32_t len_norm,
                                               size_t max_len);

// Translates one whitespace-tokenized sentence. The result goes to `*out`
// and must be released with [`tattn_string_free`].
//
// # Safety
// `tr` must be a live handle, `src` a NUL-terminated string and `out`
// writable.
enum TattnStatus tattn_translate(const struct TattnTranslator *tr, const char *src, char **out);

// Releases a translator. NULL is ignored.
//
// # Safety
// `tr` must come from [`tattn_translator_open`] and not have been freed.
void tattn_translator_free(struct TattnTranslator *tr);

// Softmax attention weights of `n` scores into `out`.
//
// # Safety
// `scores` and `out` must point to `n` doubles.
enum TattnStatus tattn_attend_global(const double *scores, size_t n, double *out);

// Temporal attention over a row-major `steps × n` score matrix: row `t` of
// `out` receives the weights for decoder step `t + 1`. `window` limits the
// history to the last `window` steps; 0 keeps all of it.
//
// # Safety
// `scores` and `out` must point to `steps * n` doubles.
enum TattnStatus tattn_attend_temporal(const double *scores,
                                       size_t steps,
                                       size_t n,
                                       size_t window,
                                       double *out);

// Corpus BLEU (0–100) of newline-separated hypotheses against references.
//
// # Safety
// `hyps` and `refs` must be NUL-terminated strings; `out` writable.
enum TattnStatus tattn_bleu(const char *hyps, const char *refs, double *out);

// Corpus TER (percent) of newline-separated hypotheses against references.
//
// # Safety
// As for [`tattn_bleu`].
enum TattnStatus tattn_ter(const char *hyps, const char *refs, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TATTN_H */
