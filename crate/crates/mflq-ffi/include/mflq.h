/* C interface to the mflq mean-field linear-quadratic control toolkit.
 *
 * Usage pattern:
 *
 *   MflqProblem *problem = NULL;
 *   if (mflq_problem_load("problem.toml", &problem) != MFLQ_OK) {
 *       fprintf(stderr, "%s\n", mflq_last_error());
 *       return 1;
 *   }
 *   MflqSolution *solution = NULL;
 *   if (mflq_solve_model_based(problem, 0.0, 0, &solution) == MFLQ_OK) {
 *       uint32_t n = mflq_solution_state_dim(solution);
 *       double *p = malloc(sizeof(double) * n * n);
 *       mflq_solution_get_matrix(solution, MFLQ_MATRIX_P, p, (size_t)n * n);
 *       ...
 *   }
 *   mflq_solution_free(solution);
 *   mflq_problem_free(problem);
 *
 * All matrix buffers are row-major. Every function that can fail returns
 * an MflqStatus; after a non-OK status, mflq_last_error() describes the
 * failure (thread-local, valid until the next call on the same thread).
 * Handles are not thread-safe; do not share one handle across threads
 * without external synchronization.
 */

#ifndef MFLQ_H
#define MFLQ_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Result of every call. Matches the CLI exit codes. */
typedef enum MflqStatus {
    MFLQ_OK = 0,           /* success */
    MFLQ_USAGE = 1,        /* bad arguments, null pointers, parse failure */
    MFLQ_PRECONDITION = 2, /* violated mathematical precondition */
    MFLQ_NUMERICAL = 3,    /* divergence, rank loss, or no convergence */
} MflqStatus;

/* Which matrix of a solution to copy out. */
typedef enum MflqMatrix {
    MFLQ_MATRIX_P = 0,    /* fluctuation Riccati solution, n x n */
    MFLQ_MATRIX_PHAT = 1, /* mean Riccati solution, n x n */
    MFLQ_MATRIX_K = 2,    /* fluctuation feedback gain, m x n */
    MFLQ_MATRIX_KHAT = 3, /* mean feedback gain, m x n */
} MflqMatrix;

/* Opaque parsed problem (system, weights, optional gain, run settings). */
typedef struct MflqProblem MflqProblem;

/* Opaque converged solution (Riccati pair, gains, iteration history). */
typedef struct MflqSolution MflqSolution;

/* Message describing the most recent failure on this thread; empty after
 * a success. Valid until the next mflq_* call on the same thread. */
const char *mflq_last_error(void);

/* --- Problem lifecycle ------------------------------------------------ */

/* Parse a problem from a TOML config file on disk. On MFLQ_OK, *out owns
 * a new handle that must be released with mflq_problem_free. */
MflqStatus mflq_problem_load(const char *path, MflqProblem **out);

/* Parse a problem from config text held in memory. */
MflqStatus mflq_problem_parse(const char *text, MflqProblem **out);

/* Release a problem handle. Accepts NULL. */
void mflq_problem_free(MflqProblem *problem);

/* State / control dimensions (0 for NULL handles). */
uint32_t mflq_problem_state_dim(const MflqProblem *problem);
uint32_t mflq_problem_control_dim(const MflqProblem *problem);

/* Diagnostics collected while loading (asymmetric weights symmetrized,
 * definiteness condition violated, ...). Warning strings live as long as
 * the problem handle; index past the end returns NULL. */
uint32_t mflq_problem_warning_count(const MflqProblem *problem);
const char *mflq_problem_warning(const MflqProblem *problem, uint32_t index);

/* --- Solvers ----------------------------------------------------------- */

/* Exact policy iteration with Lyapunov-solve evaluations. Pass
 * epsilon <= 0 and max_iter == 0 to use the built-in defaults
 * (1e-9 and 100). On MFLQ_OK, *out owns a new solution handle. */
MflqStatus mflq_solve_model_based(const MflqProblem *problem, double epsilon,
                                  uint32_t max_iter, MflqSolution **out);

/* Trajectory-driven policy iteration: simulated ensembles and least
 * squares, never reading the drift matrices. Uses the config's [rl]
 * block, grid, seed, and starting [gain] (required). */
MflqStatus mflq_solve_trajectory_driven(const MflqProblem *problem,
                                        MflqSolution **out);

/* Release a solution handle. Accepts NULL. */
void mflq_solution_free(MflqSolution *solution);

/* --- Solution accessors ------------------------------------------------ */

uint32_t mflq_solution_state_dim(const MflqSolution *solution);
uint32_t mflq_solution_control_dim(const MflqSolution *solution);

/* Number of policy comparisons performed before convergence. */
uint32_t mflq_solution_iterations(const MflqSolution *solution);

/* Copy one matrix into out, row-major. len must equal rows*cols of the
 * requested matrix: n*n for P/PHAT, m*n for K/KHAT. */
MflqStatus mflq_solution_get_matrix(const MflqSolution *solution,
                                    MflqMatrix which, double *out, size_t len);

/* Final residual norms (Frobenius) of the converged pair: fluctuation
 * equation into *resid_p, mean equation into *resid_phat. */
MflqStatus mflq_solution_residuals(const MflqSolution *solution,
                                   double *resid_p, double *resid_phat);

/* --- Standalone residual check ----------------------------------------- */

/* Evaluate both Riccati residual norms for a caller-supplied candidate
 * pair (p_data, phat_data: row-major n x n with n matching the problem). */
MflqStatus mflq_check_residuals(const MflqProblem *problem,
                                const double *p_data, const double *phat_data,
                                uint32_t n, double *resid_p,
                                double *resid_phat);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* MFLQ_H */
