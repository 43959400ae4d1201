//! Vectorization and Kronecker-product machinery for turning matrix
//! equations into linear systems, plus the small numerical predicates
//! (symmetry, definiteness, rank) shared by the solvers.
//!
//! Conventions: `vec` stacks columns top to bottom; `vec_plus` keeps one
//! copy of each entry of a symmetric matrix (diagonal and sub-diagonal of
//! each column, left to right) with the off-diagonal entries doubled, so
//! that quadratic forms contract cleanly: `kcal_vec(x) * vec(P) = xᵀPx`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};

/// Relative Frobenius tolerance below which a matrix counts as symmetric.
pub const SYM_TOL: f64 = 1e-10;
/// Positive-definiteness margin, relative to the Frobenius norm.
pub const PD_TOL_FACTOR: f64 = 1e-12;
/// Singular values below `RANK_TOL_FACTOR * sigma_max` count as zero.
pub const RANK_TOL_FACTOR: f64 = 1e-8;

/// Column-major vectorization of a matrix.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: reshape a vector back into a `rows x cols` matrix.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "unvec: vector of length {} cannot fill a {rows}x{cols} matrix",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Half-vectorization of a symmetric matrix: for each column, the diagonal
/// entry followed by the sub-diagonal entries, with off-diagonal entries
/// doubled. Length `n(n+1)/2`.
pub fn vec_plus(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = square_dim(p, "vec_plus")?;
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut idx = 0;
    for j in 0..n {
        out[idx] = p[(j, j)];
        idx += 1;
        for i in (j + 1)..n {
            out[idx] = 2.0 * p[(i, j)];
            idx += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`vec_plus`]: rebuild the symmetric matrix, halving the
/// doubled off-diagonal entries.
pub fn unvec_plus(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * (n + 1) / 2 {
        return Err(Error::Dimension(format!(
            "unvec_plus: vector of length {} does not match n = {n}",
            v.len()
        )));
    }
    let mut p = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        p[(j, j)] = v[idx];
        idx += 1;
        for i in (j + 1)..n {
            let half = 0.5 * v[idx];
            p[(i, j)] = half;
            p[(j, i)] = half;
            idx += 1;
        }
    }
    Ok(p)
}

/// The duplication matrix `T` with `vec(P) = T * vec_plus(P)` for every
/// symmetric `P`. Shape `n^2 x n(n+1)/2`, full column rank; rows belonging
/// to off-diagonal entries carry the factor 1/2 that undoes the doubling
/// in [`vec_plus`].
#[derive(Debug, Clone)]
pub struct DuplicationMatrix {
    n: usize,
    matrix: DMatrix<f64>,
}

impl DuplicationMatrix {
    pub fn new(n: usize) -> Self {
        let cols = n * (n + 1) / 2;
        let mut t = DMatrix::zeros(n * n, cols);
        for j in 0..n {
            for i in 0..n {
                let row = j * n + i;
                let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
                let col = vech_index(lo, hi, n);
                t[(row, col)] = if i == j { 1.0 } else { 0.5 };
            }
        }
        DuplicationMatrix { n, matrix: t }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of free entries of a symmetric matrix, `n(n+1)/2`.
    pub fn reduced_len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// Position of entry `(hi, lo)` with `hi >= lo` inside [`vec_plus`] output.
fn vech_index(lo: usize, hi: usize, n: usize) -> usize {
    // Column `lo` starts after the lower segments of columns 0..lo, which
    // hold n + (n-1) + ... + (n-lo+1) = lo(2n - lo + 1)/2 entries.
    lo * (2 * n - lo + 1) / 2 + (hi - lo)
}

/// Kronecker product `a (x) b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Quadratic-form operator for matrices: `kcal(A) = Aᵀ (x) Aᵀ`, so that
/// `kcal(A) * vec(P) = vec(AᵀPA)`.
pub fn kcal(a: &DMatrix<f64>) -> DMatrix<f64> {
    let at = a.transpose();
    at.kronecker(&at)
}

/// Quadratic-form row for vectors: `kcal_vec(x) * vec(P) = xᵀPx`.
/// This is the 1 x n^2 row `xᵀ (x) xᵀ`.
pub fn kcal_vec(x: &DVector<f64>) -> RowDVector<f64> {
    let n = x.len();
    let mut row = RowDVector::zeros(n * n);
    for j in 0..n {
        for i in 0..n {
            row[j * n + i] = x[i] * x[j];
        }
    }
    row
}

/// Write `kcal_vec(x)` into a slice without allocating; used by the
/// per-trajectory accumulators. `out` must have length `n^2`.
pub(crate) fn kcal_vec_into(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(out.len(), n * n);
    for j in 0..n {
        let xj = x[j];
        for i in 0..n {
            out[j * n + i] = x[i] * xj;
        }
    }
}

/// Quadratic form `⟨Mx, x⟩ = xᵀMx` over a coordinate slice, accumulated in
/// a fixed row-then-entry order. The simulation accumulators and their
/// stored-trajectory replays both call this, which is what makes streamed
/// and bundle-derived statistics bitwise identical.
pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    debug_assert_eq!(m.shape(), (n, n));
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for k in 0..n {
            row += m[(i, k)] * x[k];
        }
        total += x[i] * row;
    }
    total
}

/// Bilinear form `⟨Mx, y⟩ = yᵀMx` for an r×c matrix, x of length c, y of
/// length r; same fixed accumulation order as [`quad_form`].
pub(crate) fn bilinear_form(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let (r, c) = m.shape();
    debug_assert_eq!(x.len(), c);
    debug_assert_eq!(y.len(), r);
    let mut total = 0.0;
    for i in 0..r {
        let mut row = 0.0;
        for k in 0..c {
            row += m[(i, k)] * x[k];
        }
        total += y[i] * row;
    }
    total
}

/// Numerical rank: number of singular values above
/// `RANK_TOL_FACTOR * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let svals = m.clone().singular_values();
    let smax = svals.max();
    if smax <= 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > RANK_TOL_FACTOR * smax).count()
}

/// Minimum-norm least-squares solution of `a x = b` through an orthogonal
/// (SVD) factorization. Requires full column rank; a rank-deficient system
/// is reported as an error carrying the measured rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "lstsq: matrix has {} rows but right-hand side has {}",
            a.nrows(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = if smax > 0.0 {
        svd.singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL_FACTOR * smax)
            .count()
    } else {
        0
    };
    if rank < a.ncols() {
        return Err(Error::RankDeficient {
            system: "least squares",
            rank,
            required: a.ncols(),
        });
    }
    svd.solve(&b.clone(), RANK_TOL_FACTOR * smax)
        .map_err(|e| Error::NotSolvable(format!("svd solve: {e}")))
}

/// `|M - Mᵀ|_F / |M|_F`, with the convention 0 for the zero matrix.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Positive definiteness with margin `PD_TOL_FACTOR * |M|_F`.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    min_symmetric_eigenvalue(m) > PD_TOL_FACTOR * m.norm()
}

/// Positive semidefiniteness up to `-tol` on the smallest eigenvalue.
pub fn is_positive_semidefinite(m: &DMatrix<f64>, tol: f64) -> bool {
    min_symmetric_eigenvalue(m) >= -tol
}

pub(crate) fn square_dim(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}
