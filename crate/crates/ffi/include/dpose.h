#ifndef DPOSE_H
#define DPOSE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DposeStatus {
  DPOSE_STATUS_OK = 0,
  DPOSE_STATUS_NULL_POINTER = 1,
  DPOSE_STATUS_INVALID_ARGUMENT = 2,
  DPOSE_STATUS_IO = 3,
  DPOSE_STATUS_DATA = 4,
  DPOSE_STATUS_GEOMETRY = 5,
  DPOSE_STATUS_MODEL = 6,
  DPOSE_STATUS_BUFFER_TOO_SMALL = 7,
  DPOSE_STATUS_PANIC = 8,
} DposeStatus;

/**
 * Opaque model handle.
 */
typedef struct DposeModel DposeModel;

/**
 * Opaque structure handle.
 */
typedef struct DposeStructure DposeStructure;

/**
 * Ensemble summary filled by [`dpose_predict`].
 */
typedef struct DposePrediction {
  /**
   * eV
   */
  double mean;
  /**
   * eV²
   */
  double variance;
  /**
   * eV
   */
  double sigma;
  /**
   * eV/atom
   */
  double sigma_per_atom;
  size_t n_atoms;
  size_t n_heads;
} DposePrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DposeStatus dpose_model_load(const char *path, struct DposeModel **out);

/**
 * Creates a freshly initialized model. `hyper_kv` may be null (defaults)
 * or hold `key=value` lines overriding the architecture.
 *
 * # Safety
 * `hyper_kv` must be null or NUL-terminated; `out` must be writable.
 */
enum DposeStatus dpose_model_init(const char *hyper_kv, uint64_t seed, struct DposeModel **out);

/**
 * Writes the model to a checkpoint file with default training settings.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum DposeStatus dpose_model_save(const struct DposeModel *model, const char *path);

/**
 * Number of ensemble heads, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t dpose_model_n_heads(const struct DposeModel *model);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used afterwards.
 */
void dpose_model_free(struct DposeModel *model);

/**
 * Builds a structure. `positions` holds `3·n_atoms` Cartesian coordinates
 * (Å). `cell` is null for a molecule or 9 values (lattice vectors as rows);
 * `pbc` is null (all periodic when a cell is given) or 3 flags.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `out` must be writable.
 */
enum DposeStatus dpose_structure_new(const uint32_t *species,
                                     const double *positions,
                                     size_t n_atoms,
                                     const double *cell,
                                     const bool *pbc,
                                     struct DposeStructure **out);

/**
 * # Safety
 * `structure` must be null or come from this library, and not be used afterwards.
 */
void dpose_structure_free(struct DposeStructure *structure);

/**
 * Predicts the ensemble energy. When `head_energies` is non-null it must
 * hold at least `head_capacity` doubles and receives one energy per head;
 * a smaller capacity returns `BufferTooSmall` with `out` still filled.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable;
 * `head_energies` must be null or hold `head_capacity` doubles.
 */
enum DposeStatus dpose_predict(const struct DposeModel *model,
                               const struct DposeStructure *structure,
                               struct DposePrediction *out,
                               double *head_energies,
                               size_t head_capacity);

/**
 * Gaussian negative log-likelihood `½[Δy²/σ² + ln(2πσ²)]`, `σ² = max(variance, floor)`.
 */
double dpose_nll_loss(double delta_y, double variance, double floor);

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next call into this library from the same thread.
 */
const char *dpose_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *dpose_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPOSE_H */
