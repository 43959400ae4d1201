//! C ABI over the mean-field LQ solvers.
//!
//! Callers interact through two opaque handles — a problem (parsed config)
//! and a solution (converged Riccati pair, gains, and iteration history) —
//! plus flat `double` buffers in row-major order. Every function returns an
//! [`MflqStatus`]; on any non-OK status a thread-local message is available
//! from [`mflq_last_error`] until the next call on the same thread.
//!
//! The exported surface is declared for C consumers in `include/mflq.h`,
//! which is maintained by hand and checked against this file by the ABI
//! test suite.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mflq_core::config::{load_config, parse_config, ProblemConfig};
use mflq_core::gare::{gare_residuals, solve_gare_model_based, MAX_ITERATIONS, MODEL_EPSILON};
use mflq_core::model::RiccatiPair;
use mflq_core::rl::{run_policy_iteration, ModelFreeView};
use mflq_core::{Error, ErrorClass};
use nalgebra::DMatrix;

/// Result of every ABI call. Non-OK values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MflqStatus {
    /// Success.
    Ok = 0,
    /// Invalid arguments, null pointers, or unparseable input.
    Usage = 1,
    /// A mathematical precondition is violated.
    Precondition = 2,
    /// A numerical failure (divergence, rank loss, no convergence).
    Numerical = 3,
}

/// Which matrix of a solution to copy out.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MflqMatrix {
    /// Fluctuation Riccati solution P (n×n).
    P = 0,
    /// Mean Riccati solution P̂ (n×n).
    Phat = 1,
    /// Fluctuation feedback gain K (m×n).
    K = 2,
    /// Mean feedback gain K̂ (m×n).
    Khat = 3,
}

/// Opaque parsed problem.
pub struct MflqProblem {
    config: ProblemConfig,
    warnings: Vec<CString>,
}

/// Opaque converged solution.
pub struct MflqSolution {
    inner: mflq_core::gare::GareSolution,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|b| *b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("interior NULs removed");
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::default();
    });
}

fn status_of(err: &Error) -> MflqStatus {
    match err.class() {
        ErrorClass::Usage => MflqStatus::Usage,
        ErrorClass::Precondition => MflqStatus::Precondition,
        ErrorClass::Numerical => MflqStatus::Numerical,
    }
}

fn usage(msg: &str) -> MflqStatus {
    set_error(msg);
    MflqStatus::Usage
}

/// Run an ABI body, translating errors and panics into statuses.
fn guarded(body: impl FnOnce() -> Result<(), Error>) -> MflqStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MflqStatus::Ok,
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic");
            MflqStatus::Numerical
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::InvalidInput(format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| Error::InvalidInput(format!("{what} is not valid UTF-8")))
}

/// Message describing the most recent failure on this thread, or an empty
/// string after a success. The pointer stays valid until the next ABI call
/// from the same thread.
#[no_mangle]
pub extern "C" fn mflq_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn finish_problem(
    parsed: Result<(ProblemConfig, Vec<String>), Error>,
    out: *mut *mut MflqProblem,
) -> Result<(), Error> {
    let (config, warnings) = parsed?;
    let warnings = warnings
        .into_iter()
        .map(|w| CString::new(w.replace('\0', "")).expect("interior NULs removed"))
        .collect();
    let handle = Box::new(MflqProblem { config, warnings });
    unsafe { *out = Box::into_raw(handle) };
    Ok(())
}

/// Parse a problem from a config file on disk.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid location to
/// store the new handle, which must later be released with
/// [`mflq_problem_free`].
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_load(
    path: *const c_char,
    out: *mut *mut MflqProblem,
) -> MflqStatus {
    if out.is_null() {
        return usage("out is null");
    }
    guarded(|| {
        let path = unsafe { cstr_arg(path, "path")? };
        finish_problem(load_config(Path::new(path)), out)
    })
}

/// Parse a problem from config text held in memory.
///
/// # Safety
/// Same contract as [`mflq_problem_load`], with `text` the NUL-terminated
/// config document.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_parse(
    text: *const c_char,
    out: *mut *mut MflqProblem,
) -> MflqStatus {
    if out.is_null() {
        return usage("out is null");
    }
    guarded(|| {
        let text = unsafe { cstr_arg(text, "text")? };
        finish_problem(parse_config(text), out)
    })
}

/// Release a problem handle. `problem` may be null.
///
/// # Safety
/// `problem` must have come from a problem constructor and not already be
/// freed.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_free(problem: *mut MflqProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// State dimension n, or 0 for a null handle.
///
/// # Safety
/// `problem` must be a live problem handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_state_dim(problem: *const MflqProblem) -> u32 {
    unsafe { problem.as_ref() }.map_or(0, |p| p.config.n() as u32)
}

/// Control dimension m, or 0 for a null handle.
///
/// # Safety
/// `problem` must be a live problem handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_control_dim(problem: *const MflqProblem) -> u32 {
    unsafe { problem.as_ref() }.map_or(0, |p| p.config.m() as u32)
}

/// Number of diagnostics collected while loading (asymmetric weights,
/// failed definiteness condition, …).
///
/// # Safety
/// `problem` must be a live problem handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_warning_count(problem: *const MflqProblem) -> u32 {
    unsafe { problem.as_ref() }.map_or(0, |p| p.warnings.len() as u32)
}

/// Borrow the `index`-th load diagnostic; null when out of range. The
/// pointer stays valid for the life of the problem handle.
///
/// # Safety
/// `problem` must be a live problem handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_warning(
    problem: *const MflqProblem,
    index: u32,
) -> *const c_char {
    unsafe { problem.as_ref() }
        .and_then(|p| p.warnings.get(index as usize))
        .map_or(ptr::null(), |w| w.as_ptr())
}

fn finish_solution(
    solved: Result<mflq_core::gare::GareSolution, Error>,
    out: *mut *mut MflqSolution,
) -> Result<(), Error> {
    let inner = solved?;
    unsafe { *out = Box::into_raw(Box::new(MflqSolution { inner })) };
    Ok(())
}

/// Solve by exact policy iteration (Lyapunov evaluations on the model).
/// Pass `epsilon <= 0` and `max_iter == 0` for the defaults.
///
/// # Safety
/// `problem` must be a live problem handle; `out` must be valid to store
/// the new handle, released later with [`mflq_solution_free`].
#[no_mangle]
pub unsafe extern "C" fn mflq_solve_model_based(
    problem: *const MflqProblem,
    epsilon: f64,
    max_iter: u32,
    out: *mut *mut MflqSolution,
) -> MflqStatus {
    if out.is_null() {
        return usage("out is null");
    }
    guarded(|| {
        let p = unsafe { problem.as_ref() }
            .ok_or_else(|| Error::InvalidInput("problem is null".into()))?;
        let epsilon = if epsilon > 0.0 { epsilon } else { MODEL_EPSILON };
        let max_iter = if max_iter > 0 { max_iter as usize } else { MAX_ITERATIONS };
        finish_solution(
            solve_gare_model_based(
                &p.config.system,
                &p.config.weights,
                p.config.gain.as_ref(),
                epsilon,
                max_iter,
            ),
            out,
        )
    })
}

/// Solve by trajectory-driven policy iteration, using the config's `[rl]`
/// block, grid, seed, and starting `[gain]`.
///
/// # Safety
/// Same contract as [`mflq_solve_model_based`].
#[no_mangle]
pub unsafe extern "C" fn mflq_solve_trajectory_driven(
    problem: *const MflqProblem,
    out: *mut *mut MflqSolution,
) -> MflqStatus {
    if out.is_null() {
        return usage("out is null");
    }
    guarded(|| {
        let p = unsafe { problem.as_ref() }
            .ok_or_else(|| Error::InvalidInput("problem is null".into()))?;
        let gain0 = p.config.gain.as_ref().ok_or_else(|| {
            Error::InvalidInput("the trajectory-driven solver needs a starting [gain] block".into())
        })?;
        finish_solution(
            run_policy_iteration(
                &p.config.system,
                &ModelFreeView::from_system(&p.config.system),
                &p.config.weights,
                gain0,
                &p.config.rl_config(),
            ),
            out,
        )
    })
}

/// Release a solution handle. `solution` may be null.
///
/// # Safety
/// `solution` must have come from a solver and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_free(solution: *mut MflqSolution) {
    if !solution.is_null() {
        drop(unsafe { Box::from_raw(solution) });
    }
}

/// State dimension n of a solution, or 0 for a null handle.
///
/// # Safety
/// `solution` must be a live solution handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_state_dim(solution: *const MflqSolution) -> u32 {
    unsafe { solution.as_ref() }.map_or(0, |s| s.inner.pair.n() as u32)
}

/// Control dimension m of a solution, or 0 for a null handle.
///
/// # Safety
/// `solution` must be a live solution handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_control_dim(solution: *const MflqSolution) -> u32 {
    unsafe { solution.as_ref() }.map_or(0, |s| s.inner.gain.k().nrows() as u32)
}

/// Number of policy comparisons the solver performed.
///
/// # Safety
/// `solution` must be a live solution handle or null.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_iterations(solution: *const MflqSolution) -> u32 {
    unsafe { solution.as_ref() }.map_or(0, |s| s.inner.iterations() as u32)
}

/// Copy one solution matrix into `out` in row-major order. `len` must
/// equal rows×cols for the requested matrix (n² for P/P̂, m·n for K/K̂).
///
/// # Safety
/// `solution` must be a live solution handle and `out` must point to at
/// least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_get_matrix(
    solution: *const MflqSolution,
    which: MflqMatrix,
    out: *mut f64,
    len: usize,
) -> MflqStatus {
    guarded(|| {
        let s = unsafe { solution.as_ref() }
            .ok_or_else(|| Error::InvalidInput("solution is null".into()))?;
        if out.is_null() {
            return Err(Error::InvalidInput("out is null".into()));
        }
        let m = match which {
            MflqMatrix::P => s.inner.pair.p(),
            MflqMatrix::Phat => s.inner.pair.p_hat(),
            MflqMatrix::K => s.inner.gain.k(),
            MflqMatrix::Khat => s.inner.gain.k_hat(),
        };
        let need = m.nrows() * m.ncols();
        if len != need {
            return Err(Error::InvalidInput(format!(
                "matrix needs a buffer of {need} doubles, got {len}"
            )));
        }
        let dst = unsafe { std::slice::from_raw_parts_mut(out, len) };
        let mut idx = 0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                dst[idx] = m[(i, j)];
                idx += 1;
            }
        }
        Ok(())
    })
}

/// Final residual norms of a solution (Frobenius, fluctuation then mean).
///
/// # Safety
/// `solution` must be a live solution handle; both out-pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_residuals(
    solution: *const MflqSolution,
    resid_p: *mut f64,
    resid_phat: *mut f64,
) -> MflqStatus {
    guarded(|| {
        let s = unsafe { solution.as_ref() }
            .ok_or_else(|| Error::InvalidInput("solution is null".into()))?;
        if resid_p.is_null() || resid_phat.is_null() {
            return Err(Error::InvalidInput("residual out-pointer is null".into()));
        }
        let last = s
            .inner
            .history
            .last()
            .ok_or_else(|| Error::InvalidInput("solution has no iteration history".into()))?;
        unsafe {
            *resid_p = last.resid_p;
            *resid_phat = last.resid_phat;
        }
        Ok(())
    })
}

/// Evaluate the Riccati residual norms of a caller-supplied candidate pair
/// (`p_data`, `phat_data`: row-major n×n).
///
/// # Safety
/// `problem` must be a live problem handle; `p_data`/`phat_data` must
/// point to n² doubles; the out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_check_residuals(
    problem: *const MflqProblem,
    p_data: *const f64,
    phat_data: *const f64,
    n: u32,
    resid_p: *mut f64,
    resid_phat: *mut f64,
) -> MflqStatus {
    guarded(|| {
        let prob = unsafe { problem.as_ref() }
            .ok_or_else(|| Error::InvalidInput("problem is null".into()))?;
        if p_data.is_null() || phat_data.is_null() {
            return Err(Error::InvalidInput("candidate matrix pointer is null".into()));
        }
        if resid_p.is_null() || resid_phat.is_null() {
            return Err(Error::InvalidInput("residual out-pointer is null".into()));
        }
        let n = n as usize;
        if n != prob.config.n() {
            return Err(Error::Dimension(format!(
                "candidate pair is {n}x{n} but the problem has n = {}",
                prob.config.n()
            )));
        }
        let nn = n * n;
        let p = DMatrix::from_row_slice(n, n, unsafe { std::slice::from_raw_parts(p_data, nn) });
        let p_hat =
            DMatrix::from_row_slice(n, n, unsafe { std::slice::from_raw_parts(phat_data, nn) });
        let pair = RiccatiPair::new(p, p_hat)?;
        let resid = gare_residuals(&prob.config.system, &prob.config.weights, &pair)?;
        let (rp, rph) = resid.norms();
        unsafe {
            *resid_p = rp;
            *resid_phat = rph;
        }
        Ok(())
    })
}
