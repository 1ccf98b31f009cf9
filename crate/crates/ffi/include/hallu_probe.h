#ifndef HALLU_PROBE_H
#define HALLU_PROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_UTF8 = 2,
  HP_STATUS_IO = 3,
  HP_STATUS_BAD_CHECKPOINT = 4,
  HP_STATUS_DIMENSION_MISMATCH = 5,
  HP_STATUS_BUFFER_TOO_SMALL = 6,
  HP_STATUS_INVALID_ARGUMENT = 7,
  HP_STATUS_PANIC = 99,
} HpStatus;

/**
 * Sentence label produced by [`hp_map_booleans`].
 */
typedef enum HpLabel {
  HP_LABEL_GROUNDED = 0,
  HP_LABEL_HALLUCINATED = 1,
  HP_LABEL_INVALID = 2,
} HpLabel;

/**
 * A loaded probe. Opaque to C callers.
 */
typedef struct HpProbe HpProbe;

/**
 * Byte range `[start, end)` of one sentence in the UTF-8 input.
 */
typedef struct HpSpan {
  size_t start;
  size_t end;
} HpSpan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hp_version(void);

/**
 * Message for the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *hp_last_error_message(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum HpStatus hp_probe_load(const char *path, struct HpProbe **out);

/**
 * Decodes a checkpoint held in memory. On success `*out` owns a new handle.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` must be writable.
 */
enum HpStatus hp_probe_from_bytes(const uint8_t *bytes, size_t len, struct HpProbe **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `probe` must come from this library and must not be used afterwards.
 */
void hp_probe_free(struct HpProbe *probe);

/**
 * Number of features the probe expects per row, or 0 for a null handle.
 *
 * # Safety
 * `probe` must be null or a live handle.
 */
size_t hp_probe_input_size(const struct HpProbe *probe);

/**
 * Scores `rows` row-major feature vectors of width `dim` and writes one
 * hallucination probability per row to `out`.
 *
 * # Safety
 * `features` must hold `rows * dim` floats and `out` room for `rows` floats.
 */
enum HpStatus hp_probe_predict(const struct HpProbe *probe,
                               const float *features,
                               size_t rows,
                               size_t dim,
                               float *out);

/**
 * Maps a judge verdict to a label for an answerable or unanswerable prompt.
 *
 * # Safety
 * `out` must be writable.
 */
enum HpStatus hp_map_booleans(bool answerable,
                              bool conflicting,
                              bool grounded,
                              bool has_factual_information,
                              bool no_clear_answer,
                              enum HpLabel *out);

/**
 * Sets `*out` to whether `quote` is a non-empty exact substring of
 * `sentence`.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` writable.
 */
enum HpStatus hp_verify_quote(const char *sentence, const char *quote, bool *out);

/**
 * Segments `text` into sentences. `*count` always receives the number of
 * sentences found; spans are written only when `capacity` is large enough,
 * otherwise `HP_STATUS_BUFFER_TOO_SMALL` is returned. Pass a null `spans`
 * with zero capacity to query the count.
 *
 * # Safety
 * `text` must be NUL-terminated, `spans` must have room for `capacity`
 * entries and `count` must be writable.
 */
enum HpStatus hp_split_sentences(const char *text_in,
                                 struct HpSpan *spans,
                                 size_t capacity,
                                 size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HALLU_PROBE_H */
