#ifndef ICL_MEANSHIFT_H
#define ICL_MEANSHIFT_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum IcmStatus {
  ICM_STATUS_OK = 0,
  ICM_STATUS_NULL_POINTER = 1,
  ICM_STATUS_INVALID_ARGUMENT = 2,
  ICM_STATUS_NUMERIC = 3,
  ICM_STATUS_PRECONDITION = 4,
  ICM_STATUS_PARSE = 5,
  ICM_STATUS_CONFIG = 6,
  ICM_STATUS_IO = 7,
  // An output buffer is shorter than the result; nothing was written.
  ICM_STATUS_BUFFER_TOO_SMALL = 8,
  // A Rust panic was caught at the boundary.
  ICM_STATUS_INTERNAL = 9,
} IcmStatus;

// Attention mode of the dynamics.
typedef enum IcmMode {
  ICM_MODE_FULL_SOFTMAX = 0,
  ICM_MODE_LABEL_DOMINATED = 1,
} IcmMode;

// Whether label values are centered before aggregation.
typedef enum IcmCentering {
  ICM_CENTERING_CENTERED = 0,
  ICM_CENTERING_UNCENTERED = 1,
} IcmCentering;

// A dynamics schedule with its attention mode and centering.
typedef struct IcmDynamics IcmDynamics;

// A prompt: labeled and unlabeled context rows plus one query.
typedef struct IcmPrompt IcmPrompt;

// Transformer weights.
typedef struct IcmWeights IcmWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty when none. Valid
// until the next failing call on the same thread.
const char *icm_last_error(void);

// Library version as a static NUL-terminated string.
const char *icm_version(void);

// Releases a string returned by this library. Null is ignored.
void icm_string_free(char *s);

// Samples a linear-classification prompt with `n` labeled context rows.
enum IcmStatus icm_prompt_sample_linear(size_t d,
                                        size_t k,
                                        size_t n,
                                        uint64_t seed,
                                        struct IcmPrompt **out);

// Samples a Voronoi-classification prompt with `n` labeled context rows.
enum IcmStatus icm_prompt_sample_voronoi(size_t d,
                                         size_t k,
                                         size_t n,
                                         uint64_t seed,
                                         struct IcmPrompt **out);

// Builds a prompt from row-major `x` (`n * d`), per-row `classes` (`-1`
// marks an unlabeled row) and a query of length `d`.
enum IcmStatus icm_prompt_new(size_t n,
                              size_t d,
                              size_t k,
                              const double *x,
                              const int64_t *classes,
                              const double *x_test,
                              size_t c_test,
                              struct IcmPrompt **out);

// Parses a prompt in the library's JSON prompt format.
enum IcmStatus icm_prompt_from_json(const char *json, struct IcmPrompt **out);

// Serializes a prompt to JSON; release the result with [`icm_string_free`].
enum IcmStatus icm_prompt_to_json(const struct IcmPrompt *prompt, char **out);

// Context size, feature dimension, class count and query class.
enum IcmStatus icm_prompt_shape(const struct IcmPrompt *prompt,
                                size_t *n,
                                size_t *d,
                                size_t *k,
                                size_t *c_test);

void icm_prompt_free(struct IcmPrompt *prompt);

// Creates a schedule from `layers` rows of `(alpha, gamma, alpha', gamma')`
// stored contiguously in `schedule`.
enum IcmStatus icm_dynamics_new(size_t layers,
                                const double *schedule,
                                enum IcmMode mode,
                                enum IcmCentering centering,
                                struct IcmDynamics **out);

void icm_dynamics_free(struct IcmDynamics *params);

// Runs the dynamics; writes the `K` final query logits and the argmax.
// `class` may be null.
enum IcmStatus icm_dynamics_predict(const struct IcmDynamics *params,
                                    const struct IcmPrompt *prompt,
                                    double *logits,
                                    size_t len,
                                    size_t *class_);

// Full trajectory (every state and attention matrix) as JSON; release the
// result with [`icm_string_free`].
enum IcmStatus icm_dynamics_run_json(const struct IcmDynamics *params,
                                     const struct IcmPrompt *prompt,
                                     char **out);

// Parses weights in the library's JSON weight format.
enum IcmStatus icm_weights_from_json(const char *json, struct IcmWeights **out);

// Parses weights in the library's binary weight format.
enum IcmStatus icm_weights_from_bytes(const uint8_t *bytes, size_t len, struct IcmWeights **out);

// The transformer whose forward pass equals the centered dynamics.
enum IcmStatus icm_weights_from_dynamics(const struct IcmDynamics *params,
                                         size_t d,
                                         size_t k,
                                         struct IcmWeights **out);

// Serializes weights to JSON; release the result with [`icm_string_free`].
enum IcmStatus icm_weights_to_json(const struct IcmWeights *weights, char **out);

// Forward pass; writes the `K` query logits and the argmax. `class` may be
// null.
enum IcmStatus icm_weights_forward(const struct IcmWeights *weights,
                                   const struct IcmPrompt *prompt,
                                   double *logits,
                                   size_t len,
                                   size_t *class_);

void icm_weights_free(struct IcmWeights *weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICL_MEANSHIFT_H */
