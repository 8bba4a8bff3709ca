#ifndef ORTHOCL_H
#define ORTHOCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum {
  OCL_STATUS_OK = 0,
  OCL_STATUS_NULL_POINTER = 1,
  OCL_STATUS_INVALID_INPUT = 2,
  OCL_STATUS_PARAMETER = 3,
  OCL_STATUS_NUMERICAL = 4,
  OCL_STATUS_INFEASIBLE = 5,
  OCL_STATUS_ALREADY_BOUND = 6,
  OCL_STATUS_CAPACITY = 7,
  OCL_STATUS_UNBOUND = 8,
  OCL_STATUS_FORMAT = 9,
  OCL_STATUS_CONSISTENCY = 10,
  OCL_STATUS_STATE = 11,
  OCL_STATUS_IO = 12,
  OCL_STATUS_OTHER = 13,
  OCL_STATUS_PANIC = 14,
} OclStatus;

/**
 * Opaque equiangular basis with its class registry.
 */
typedef struct OclBasis OclBasis;

/**
 * Opaque backbone restored from a checkpoint.
 */
typedef struct OclModel OclModel;

/**
 * Opaque orthogonal projector.
 */
typedef struct OclProjector OclProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t ocl_last_error_message(char *buf, size_t len);

/**
 * Creates a `dim`×`dim` projector initialised to the identity. Setting
 * `constant_alpha` disables the adaptive α schedule.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
OclStatus ocl_projector_new(size_t dim, double alpha0, bool constant_alpha, OclProjector **out);

/**
 * # Safety
 * `p` must be null or a handle from [`ocl_projector_new`] not yet freed.
 */
void ocl_projector_free(OclProjector *p);

/**
 * # Safety
 * `p` must be a live projector handle.
 */
size_t ocl_projector_dim(const OclProjector *p);

/**
 * Current α of the schedule.
 *
 * # Safety
 * `p` must be a live projector handle.
 */
double ocl_projector_alpha(const OclProjector *p);

/**
 * Folds one activation vector `z` of length `len` into the projector.
 *
 * # Safety
 * `p` must be a live handle and `z` valid for `len` reads.
 */
OclStatus ocl_projector_update(OclProjector *p, const double *z, size_t len);

/**
 * Writes `P · grad` for a row-major `rows`×`cols` gradient into `out`
 * (same shape).
 *
 * # Safety
 * `grad` and `out` must each be valid for `rows * cols` elements.
 */
OclStatus ocl_projector_apply(const OclProjector *p,
                              const double *grad,
                              size_t rows,
                              size_t cols,
                              double *out);

/**
 * Copies the row-major projector matrix into `out` (`len` must be dim²).
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
OclStatus ocl_projector_matrix(const OclProjector *p, double *out, size_t len);

/**
 * Number of eigenvalues of P above `threshold`.
 *
 * # Safety
 * `p` must be a live handle and `rank` valid for one write.
 */
OclStatus ocl_projector_rank(const OclProjector *p, double threshold, size_t *rank);

/**
 * Marks a task boundary (restarts the adaptive α).
 *
 * # Safety
 * `p` must be a live handle.
 */
OclStatus ocl_projector_begin_task(OclProjector *p);

/**
 * Records the completed fraction of the current task.
 *
 * # Safety
 * `p` must be a live handle.
 */
OclStatus ocl_projector_set_task_progress(OclProjector *p, double fraction);

/**
 * Generates `capacity` unit vectors in `dim` dimensions with pairwise
 * |cos| ≤ `gamma`.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
OclStatus ocl_basis_generate(size_t dim,
                             size_t capacity,
                             double gamma,
                             uint64_t seed,
                             OclBasis **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
OclStatus ocl_basis_load(const char *path, OclBasis **out);

/**
 * # Safety
 * `b` must be a live handle and `path` a NUL-terminated string.
 */
OclStatus ocl_basis_save(const OclBasis *b, const char *path);

/**
 * # Safety
 * `b` must be null or a handle not yet freed.
 */
void ocl_basis_free(OclBasis *b);

/**
 * # Safety
 * `b` must be a live handle.
 */
size_t ocl_basis_dim(const OclBasis *b);

/**
 * # Safety
 * `b` must be a live handle.
 */
size_t ocl_basis_capacity(const OclBasis *b);

/**
 * Largest pairwise |cos| over the whole basis.
 *
 * # Safety
 * `b` must be a live handle.
 */
double ocl_basis_max_abs_cosine(const OclBasis *b);

/**
 * Copies the row-major dim×capacity matrix (one unit vector per column)
 * into `out`.
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
OclStatus ocl_basis_vectors(const OclBasis *b, double *out, size_t len);

/**
 * Binds `count` new class labels to the next free basis vectors.
 *
 * # Safety
 * `labels` must be valid for `count` reads.
 */
OclStatus ocl_basis_bind_classes(OclBasis *b, const uint32_t *labels, size_t count);

/**
 * Predicts a label per row of the row-major `rows`×`dim` embeddings.
 *
 * # Safety
 * `embeddings` must be valid for `rows * dim` reads and `out` for `rows`
 * writes.
 */
OclStatus ocl_basis_predict(const OclBasis *b,
                            const double *embeddings,
                            size_t rows,
                            size_t dim,
                            uint32_t *out);

/**
 * Restores a backbone from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
OclStatus ocl_model_load(const char *path, OclModel **out);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void ocl_model_free(OclModel *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t ocl_model_input_dim(const OclModel *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
size_t ocl_model_output_dim(const OclModel *m);

/**
 * Embeds `rows` row-major inputs of width `input_dim` into `out`
 * (`rows`×output_dim).
 *
 * # Safety
 * `inputs` must be valid for `rows * input_dim` reads and `out` for `len`
 * writes.
 */
OclStatus ocl_model_embed(const OclModel *m,
                          const double *inputs,
                          size_t rows,
                          size_t input_dim,
                          double *out,
                          size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHOCL_H */
