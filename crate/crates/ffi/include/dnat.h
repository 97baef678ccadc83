#ifndef DNAT_H
#define DNAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Per-edge decision, as used by [`dnat_network_apply_choices`].
 */
typedef enum DnatChoice {
  DNAT_CHOICE_NONE = 0,
  DNAT_CHOICE_ID = 1,
  DNAT_CHOICE_SAME = 2,
} DnatChoice;

/**
 * Result code of every fallible call.
 */
typedef enum DnatStatus {
  DNAT_STATUS_OK = 0,
  DNAT_STATUS_NULL_ARGUMENT = 1,
  DNAT_STATUS_INVALID_UTF8 = 2,
  DNAT_STATUS_INVALID_ARGUMENT = 3,
  DNAT_STATUS_GRAPH_ERROR = 4,
  DNAT_STATUS_DISCONNECTED = 5,
  DNAT_STATUS_CONFIG_ERROR = 6,
  DNAT_STATUS_DIVERGED = 7,
  DNAT_STATUS_IO_ERROR = 8,
  DNAT_STATUS_CHECKPOINT_ERROR = 9,
  DNAT_STATUS_INTERNAL = 10,
  DNAT_STATUS_PANIC = 11,
} DnatStatus;

/**
 * Opaque network handle.
 */
typedef struct DnatNetwork DnatNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on this thread.
 */
const char *dnat_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dnat_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dnat_string_free(char *s);

/**
 * Builds a template network: `template` is `tiny`, `plain-cnn` or
 * `resnet-mini`; `cells` is the cell count (plain-cnn) or blocks per stage
 * (resnet-mini).
 *
 * # Safety
 * `template` must be a valid C string; `out` must be writable.
 */
enum DnatStatus dnat_network_build(const char *template_,
                                   size_t channels,
                                   size_t num_classes,
                                   size_t in_channels,
                                   size_t height,
                                   size_t width,
                                   size_t cells,
                                   struct DnatNetwork **out);

/**
 * Parses an architecture JSON document.
 *
 * # Safety
 * `json` must be a valid C string; `out` must be writable.
 */
enum DnatStatus dnat_network_from_json(const char *json, struct DnatNetwork **out);

/**
 * Serializes a network; free the result with [`dnat_string_free`].
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum DnatStatus dnat_network_to_json(const struct DnatNetwork *net, char **out);

/**
 * Releases a network handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not have been freed.
 */
void dnat_network_free(struct DnatNetwork *net);

/**
 * Number of edge instances over all cells.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum DnatStatus dnat_network_edge_count(const struct DnatNetwork *net, size_t *out);

/**
 * Trainable scalars and multiply-accumulates of one forward pass.
 *
 * # Safety
 * `net` must be a live handle; `params` and `flops` must be writable.
 */
enum DnatStatus dnat_network_cost(const struct DnatNetwork *net, uint64_t *params, uint64_t *flops);

/**
 * Writes whether the network is acyclic, shape-consistent and has every
 * cell output reachable from its input.
 *
 * # Safety
 * `net` must be a live handle; `valid` must be writable.
 */
enum DnatStatus dnat_network_validate(const struct DnatNetwork *net, bool *valid);

/**
 * Applies one choice per edge (in cell, then edge id order) and prunes.
 *
 * # Safety
 * `net` must be a live handle, `choices` must point to `len` readable
 * values and `out` must be writable.
 */
enum DnatStatus dnat_network_apply_choices(const struct DnatNetwork *net,
                                           const enum DnatChoice *choices,
                                           size_t len,
                                           struct DnatNetwork **out);

/**
 * DOT rendering of `transformed` with edges changed from `original` in red.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum DnatStatus dnat_network_diff_dot(const struct DnatNetwork *original,
                                      const struct DnatNetwork *transformed,
                                      char **out);

/**
 * Mean and sample standard deviation of `len` values.
 *
 * # Safety
 * `values` must point to `len` readable doubles; `mean` and `std` must be writable.
 */
enum DnatStatus dnat_aggregate(const double *values, size_t len, double *mean, double *std);

/**
 * Runs the two-stage pipeline described by a TOML run configuration (the
 * same text the CLI reads) and returns the final test accuracy in `[0, 1]`
 * and the transformed network.
 *
 * # Safety
 * `config_toml` must be a valid C string; `accuracy` and `out` must be writable.
 */
enum DnatStatus dnat_transform_run(const char *config_toml,
                                   double *accuracy,
                                   struct DnatNetwork **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DNAT_H */
