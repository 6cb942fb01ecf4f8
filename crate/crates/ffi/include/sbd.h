/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SBD_H
#define SBD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SBD_OK 0

#define SBD_ERR_NULL 1

#define SBD_ERR_CONFIG 2

#define SBD_ERR_IO 3

#define SBD_ERR_DATA 4

#define SBD_ERR_STATE 5

#define SBD_ERR_CHECKPOINT 6

#define SBD_ERR_BUFFER 7

#define SBD_ERR_INTERNAL 8

#define SBD_REMASK_SNAPSHOT 0

#define SBD_REMASK_POSTHOC 1

#define SBD_REMASK_RANDOM 2

#define SBD_POLICY_ANCESTRAL 0

#define SBD_POLICY_CONFIDENCE_TOPK 1

/**
 * Output of one generation: tokens, confidences and per-stage NFEs.
 */
typedef struct SbdGeneration SbdGeneration;

/**
 * A Markov source usable as an exact scorer.
 */
typedef struct SbdMarkov SbdMarkov;

/**
 * A denoiser loaded from a checkpoint or freshly initialised.
 */
typedef struct SbdModel SbdModel;

/**
 * An ordered list of sampling stages.
 */
typedef struct SbdPlan SbdPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; never null. Valid until
 * the next failing call on the same thread.
 */
const char *sbd_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t sbd_model_load(const char *path, struct SbdModel **out);

/**
 * Randomly initialised model, mainly for testing bindings.
 *
 * # Safety
 * `out` must be writable.
 */
int32_t sbd_model_init(size_t n_layers,
                       size_t n_heads,
                       size_t d_model,
                       size_t vocab_size,
                       size_t max_len,
                       uint64_t seed,
                       struct SbdModel **out);

/**
 * # Safety
 * `model` and `path` must be valid.
 */
int32_t sbd_model_save(const struct SbdModel *model, const char *path);

/**
 * Data vocabulary size `V`; the MASK id is `V`. Returns 0 for null.
 *
 * # Safety
 * `model` must be null or valid.
 */
size_t sbd_model_vocab_size(const struct SbdModel *model);

/**
 * # Safety
 * `model` must be null or a pointer from this library not yet freed.
 */
void sbd_model_free(struct SbdModel *model);

/**
 * # Safety
 * `out` must be writable.
 */
int32_t sbd_plan_new(struct SbdPlan **out);

/**
 * Appends a stage. `steps_per_block` of 0 selects the default; `gamma` is
 * ignored for the first stage.
 *
 * # Safety
 * `plan` must be valid.
 */
int32_t sbd_plan_add_stage(struct SbdPlan *plan,
                           size_t block_size,
                           double gamma,
                           size_t steps_per_block,
                           int32_t policy,
                           int32_t remask,
                           double temperature,
                           double nucleus_p);

/**
 * # Safety
 * `plan` must be null or a pointer from this library not yet freed.
 */
void sbd_plan_free(struct SbdPlan *plan);

/**
 * Generates `len` tokens. The result depends only on model, plan, `len`
 * and `seed`.
 *
 * # Safety
 * `model` and `plan` must be valid; `out` writable.
 */
int32_t sbd_generate(const struct SbdModel *model,
                     const struct SbdPlan *plan,
                     size_t len,
                     uint64_t seed,
                     struct SbdGeneration **out);

/**
 * # Safety
 * `generation` must be null or valid.
 */
size_t sbd_generation_len(const struct SbdGeneration *generation);

/**
 * Copies the tokens into `buf` (capacity `cap`).
 *
 * # Safety
 * `buf` must hold `cap` elements.
 */
int32_t sbd_generation_tokens(const struct SbdGeneration *generation, uint32_t *buf, size_t cap);

/**
 * Copies the final snapshot confidences into `buf` (capacity `cap`).
 *
 * # Safety
 * `buf` must hold `cap` elements.
 */
int32_t sbd_generation_confidences(const struct SbdGeneration *generation, double *buf, size_t cap);

/**
 * Number of stages run.
 *
 * # Safety
 * `generation` must be null or valid.
 */
size_t sbd_generation_stage_count(const struct SbdGeneration *generation);

/**
 * Forwards issued by stage `stage` (0-based), or 0 if out of range.
 *
 * # Safety
 * `generation` must be null or valid.
 */
size_t sbd_generation_stage_nfes(const struct SbdGeneration *generation, size_t stage);

/**
 * # Safety
 * `generation` must be null or a pointer from this library not yet freed.
 */
void sbd_generation_free(struct SbdGeneration *generation);

/**
 * Loads a transition matrix file (dimension line, then rows).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
int32_t sbd_markov_load(const char *path, struct SbdMarkov **out);

/**
 * Entropy rate in nats per token, NaN for null.
 *
 * # Safety
 * `markov` must be null or valid.
 */
double sbd_markov_entropy_rate(const struct SbdMarkov *markov);

/**
 * Generative perplexity of `n_seqs` row-major sequences of length `len`
 * under the chain.
 *
 * # Safety
 * `tokens` must hold `n_seqs * len` elements; `out` writable.
 */
int32_t sbd_markov_gen_ppl(const struct SbdMarkov *markov,
                           const uint32_t *tokens,
                           size_t n_seqs,
                           size_t len,
                           double *out);

/**
 * # Safety
 * `markov` must be null or a pointer from this library not yet freed.
 */
void sbd_markov_free(struct SbdMarkov *markov);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBD_H */
