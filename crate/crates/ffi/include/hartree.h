#ifndef HARTREE_H
#define HARTREE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum HartreeStatus {
  HARTREE_STATUS_OK = 0,
  HARTREE_STATUS_NULL_POINTER = 1,
  HARTREE_STATUS_INVALID_ARGUMENT = 2,
  HARTREE_STATUS_NON_FINITE = 3,
  HARTREE_STATUS_IO = 4,
  HARTREE_STATUS_FORMAT = 5,
  HARTREE_STATUS_PANIC = 6,
} HartreeStatus;

// Finite-rank density operator.
typedef struct HartreeEnsemble HartreeEnsemble;

// Split-step propagator bound to a grid and interaction sign.
typedef struct HartreePropagator HartreePropagator;

// Power-law fit `y ≈ exp(intercept) t^exponent`.
typedef struct HartreeFit {
  double exponent;
  double intercept;
  double r2;
  size_t points;
} HartreeFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or NULL. Free with [`hartree_string_free`].
char *hartree_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void hartree_string_free(char *s);

// Library version as a static NUL-terminated string.
const char *hartree_version(void);

// Builds an ensemble of `count` Gaussian orbitals on an `n`^3 grid of side
// `length`. `centers` and `boosts` hold `3 * count` values and may be NULL
// (all zero); `widths` may be NULL (all one). `sign` is 1, 0 or -1.
//
// # Safety
// Array arguments must be valid for the stated lengths; `out` must be writable.
enum HartreeStatus hartree_ensemble_gaussians(size_t n,
                                              double length,
                                              int32_t sign,
                                              size_t count,
                                              const double *occupations,
                                              const double *centers,
                                              const double *widths,
                                              const double *boosts,
                                              struct HartreeEnsemble **out);

// Loads an ensemble from a snapshot file.
//
// # Safety
// `file` must be a NUL-terminated string; `out` must be writable.
enum HartreeStatus hartree_ensemble_load(const char *file, struct HartreeEnsemble **out);

// Writes an ensemble to a snapshot file.
//
// # Safety
// `e` must be a live handle; `file` a NUL-terminated string.
enum HartreeStatus hartree_ensemble_save(const struct HartreeEnsemble *e, const char *file);

// Copies an ensemble.
//
// # Safety
// `e` must be a live handle; `out` must be writable.
enum HartreeStatus hartree_ensemble_clone(const struct HartreeEnsemble *e,
                                          struct HartreeEnsemble **out);

// Releases an ensemble. NULL is ignored.
//
// # Safety
// `e` must come from this library and not be freed twice.
void hartree_ensemble_free(struct HartreeEnsemble *e);

// Time, rank and trace of an ensemble. Any output pointer may be NULL.
//
// # Safety
// `e` must be a live handle; non-NULL outputs must be writable.
enum HartreeStatus hartree_ensemble_info(const struct HartreeEnsemble *e,
                                         double *time,
                                         size_t *rank,
                                         double *trace);

// Writes the L1, L2 and L-infinity norms of the density into `out[0..3]`.
//
// # Safety
// `e` must be a live handle; `out` must hold three doubles.
enum HartreeStatus hartree_density_norms(const struct HartreeEnsemble *e, double *out);

// Creates a propagator with step `dt`.
//
// # Safety
// `out` must be writable.
enum HartreeStatus hartree_propagator_new(size_t n,
                                          double length,
                                          int32_t sign,
                                          double dt,
                                          struct HartreePropagator **out);

// Releases a propagator. NULL is ignored.
//
// # Safety
// `p` must come from this library and not be freed twice.
void hartree_propagator_free(struct HartreePropagator *p);

// Advances `e` in place to time `t`, which must lie on the step lattice.
// On failure `e` is left unchanged.
//
// # Safety
// Both handles must be live and `e` not aliased.
enum HartreeStatus hartree_propagator_advance(const struct HartreePropagator *p,
                                              struct HartreeEnsemble *e,
                                              double t);

// Conserved energy of `e` under the propagator's interaction.
//
// # Safety
// Handles must be live; `out` must be writable.
enum HartreeStatus hartree_energy(const struct HartreePropagator *p,
                                  const struct HartreeEnsemble *e,
                                  double *out);

// Least-squares fit of `log values` against `log times` over `[t0, t1]`.
//
// # Safety
// `times` and `values` must hold `len` doubles; `out` must be writable.
enum HartreeStatus hartree_decay_fit(const double *times,
                                     const double *values,
                                     size_t len,
                                     double t0,
                                     double t1,
                                     struct HartreeFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARTREE_H */
