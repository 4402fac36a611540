#ifndef UMEIT_H
#define UMEIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Domain shapes accepted by [`umeit_domain_new`].
 */
enum UmeitShapeKind
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  /**
   * `(0, p0) x (0, p1)`
   */
  UMEIT_SHAPE_KIND_RECTANGLE = 0,
  /**
   * Radius `p0`, centred at the origin.
   */
  UMEIT_SHAPE_KIND_DISC = 1,
  /**
   * Semi-axes `p0`, `p1`.
   */
  UMEIT_SHAPE_KIND_OVOID = 2,
  /**
   * `p0 < |x| < p1`, polar grid with `nx` radial and `ny` angular nodes.
   */
  UMEIT_SHAPE_KIND_ANNULUS = 3,
  /**
   * `(0, p0) x (-p1, p1)`
   */
  UMEIT_SHAPE_KIND_SLAB = 4,
};
#ifndef __cplusplus
typedef uint32_t UmeitShapeKind;
#endif // __cplusplus

/**
 * Result of every call.
 */
typedef enum UmeitStatus {
  UMEIT_STATUS_OK = 0,
  /**
   * Null pointer, bad size or malformed parameter.
   */
  UMEIT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A mathematical precondition does not hold.
   */
  UMEIT_STATUS_PRECONDITION = 2,
  /**
   * The computation started but could not finish.
   */
  UMEIT_STATUS_NUMERICAL_ABORT = 3,
  /**
   * Internal error; the library state is unchanged.
   */
  UMEIT_STATUS_PANIC = 4,
} UmeitStatus;

typedef struct UmeitDomain UmeitDomain;

typedef struct UmeitField UmeitField;

/**
 * A solved forward problem: potential, internal functional and Cauchy data.
 */
typedef struct UmeitForward UmeitForward;

typedef struct UmeitReconstruction UmeitReconstruction;

/**
 * Marching parameters; start from [`umeit_march_options_default`].
 */
typedef struct UmeitMarchOptions {
  double cfl;
  double g_min;
  double margin_min;
  uint32_t picard_iters;
} UmeitMarchOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *umeit_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *umeit_version(void);

struct UmeitMarchOptions umeit_march_options_default(void);

/**
 * Builds a domain and its grid. `kind` is a [`UmeitShapeKind`] value.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum UmeitStatus umeit_domain_new(uint32_t kind,
                                  double p0,
                                  double p1,
                                  size_t nx,
                                  size_t ny,
                                  struct UmeitDomain **out_domain);

/**
 * # Safety
 * `domain` must be null or a handle from [`umeit_domain_new`] not yet freed.
 */
void umeit_domain_free(struct UmeitDomain *domain);

/**
 * Number of grid nodes (`nx * ny`).
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_domain_node_count(const struct UmeitDomain *domain, size_t *out_count);

/**
 * Cartesian position of every node, interleaved `x, y`; `len` must be
 * twice the node count. Node `i + nx * j` is the `(i, j)` grid node.
 *
 * # Safety
 * `xy` must point to `len` writable doubles.
 */
enum UmeitStatus umeit_domain_node_positions(const struct UmeitDomain *domain,
                                             double *xy,
                                             size_t len);

/**
 * Number of boundary samples carrying Dirichlet and Neumann data.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_domain_boundary_count(const struct UmeitDomain *domain, size_t *out_count);

/**
 * Positions of the boundary samples, interleaved `x, y`.
 *
 * # Safety
 * `xy` must point to `len` writable doubles.
 */
enum UmeitStatus umeit_domain_boundary_positions(const struct UmeitDomain *domain,
                                                 double *xy,
                                                 size_t len);

/**
 * Copies `len` node values into a new field on the domain grid.
 *
 * # Safety
 * `values` must point to `len` readable doubles.
 */
enum UmeitStatus umeit_field_new(const struct UmeitDomain *domain,
                                 const double *values,
                                 size_t len,
                                 struct UmeitField **out_field);

/**
 * # Safety
 * `field` must be null or a live field handle.
 */
void umeit_field_free(struct UmeitField *field);

/**
 * Copies the node values out; `len` must equal the node count.
 *
 * # Safety
 * `values` must point to `len` writable doubles.
 */
enum UmeitStatus umeit_field_values(const struct UmeitField *field, double *values, size_t len);

/**
 * Solves `div(sigma grad u) = 0` with Dirichlet data `f` given at the
 * boundary samples, and derives `H` and the Neumann data.
 *
 * # Safety
 * Handles must be live; `f` must point to `len` readable doubles.
 */
enum UmeitStatus umeit_forward_solve(const struct UmeitDomain *domain,
                                     const struct UmeitField *sigma,
                                     const double *f,
                                     size_t len,
                                     struct UmeitForward **out_forward);

/**
 * Convenience: Dirichlet data `f(x) = a x1 + b x2 + c` at the samples.
 *
 * # Safety
 * `f` must point to `len` writable doubles.
 */
enum UmeitStatus umeit_affine_boundary_data(const struct UmeitDomain *domain,
                                            double a,
                                            double b,
                                            double c,
                                            double *f,
                                            size_t len);

/**
 * # Safety
 * `forward` must be null or a live handle.
 */
void umeit_forward_free(struct UmeitForward *forward);

/**
 * New field holding the potential `u`.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_forward_potential(const struct UmeitForward *forward,
                                         struct UmeitField **out_field);

/**
 * New field holding the internal functional `H = sigma |grad u|^2`.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_forward_functional(const struct UmeitForward *forward,
                                          struct UmeitField **out_field);

/**
 * Fraction of spacelike boundary samples and number of null crossings for
 * the metric of a single illumination.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_forward_classify(const struct UmeitForward *forward,
                                        double g_min,
                                        double *out_spacelike_fraction,
                                        size_t *out_null_points);

/**
 * Reconstructs `sigma` from the `H` and Cauchy data of a forward solution.
 * `h` overrides the stored functional when non-null (e.g. noisy data).
 * `options` may be null for defaults.
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_reconstruct(const struct UmeitForward *forward,
                                   const struct UmeitField *h,
                                   const struct UmeitMarchOptions *options,
                                   struct UmeitReconstruction **out_reconstruction);

/**
 * # Safety
 * `reconstruction` must be null or a live handle.
 */
void umeit_reconstruction_free(struct UmeitReconstruction *reconstruction);

/**
 * New field with the reconstructed conductivity (zero outside the valid region).
 *
 * # Safety
 * Pointers must be valid or null.
 */
enum UmeitStatus umeit_reconstruction_sigma(const struct UmeitReconstruction *r,
                                            struct UmeitField **out_field);

/**
 * Validity mask (1 = reconstructed) and the number of valid nodes.
 * `mask` may be null when only the count is wanted.
 *
 * # Safety
 * `mask` must be null or point to `len` writable bytes.
 */
enum UmeitStatus umeit_reconstruction_valid(const struct UmeitReconstruction *r,
                                            uint8_t *mask,
                                            size_t len,
                                            size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UMEIT_H */
