//! Problem data for mean-field linear-quadratic control.
//!
//! The controlled state follows a linear SDE, driven by a one-dimensional
//! Brownian motion, whose drift and diffusion involve both the state/control
//! and their conditional means:
//!
//! ```text
//! dX = [A X + Ab E[X] + B u + Bb E[u]] ds + [C X + Cb E[X] + D u + Db E[u]] dW
//! ```
//!
//! Taking conditional means splits the dynamics into a fluctuation part
//! driven by the plain coefficients and a mean part driven by the "hatted"
//! sums (A + Ab, ...). The quadratic running cost mirrors that split, so
//! the weights also come in plain/hatted pairs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, is_positive_definite, min_symmetric_eigenvalue, symmetrize};

/// Coefficients of the mean-field SDE. `a, a_bar, c, c_bar` are `n x n`;
/// `b, b_bar, d, d_bar` are `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfSystem {
    a: DMatrix<f64>,
    a_bar: DMatrix<f64>,
    b: DMatrix<f64>,
    b_bar: DMatrix<f64>,
    c: DMatrix<f64>,
    c_bar: DMatrix<f64>,
    d: DMatrix<f64>,
    d_bar: DMatrix<f64>,
}

impl MfSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        a_bar: DMatrix<f64>,
        b: DMatrix<f64>,
        b_bar: DMatrix<f64>,
        c: DMatrix<f64>,
        c_bar: DMatrix<f64>,
        d: DMatrix<f64>,
        d_bar: DMatrix<f64>,
    ) -> Result<Self> {
        let n = linalg::square_dim(&a, "system matrix A")?;
        let m = b.ncols();
        for (mat, name) in [(&a_bar, "Abar"), (&c, "C"), (&c_bar, "Cbar")] {
            if mat.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "system matrix {name}: expected {n}x{n}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        for (mat, name) in [(&b, "B"), (&b_bar, "Bbar"), (&d, "D"), (&d_bar, "Dbar")] {
            if mat.shape() != (n, m) {
                return Err(Error::Dimension(format!(
                    "input matrix {name}: expected {n}x{m}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        if n == 0 || m == 0 {
            return Err(Error::Dimension(
                "system must have at least one state and one input".into(),
            ));
        }
        Ok(MfSystem {
            a,
            a_bar,
            b,
            b_bar,
            c,
            c_bar,
            d,
            d_bar,
        })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn b_bar(&self) -> &DMatrix<f64> {
        &self.b_bar
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn c_bar(&self) -> &DMatrix<f64> {
        &self.c_bar
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn d_bar(&self) -> &DMatrix<f64> {
        &self.d_bar
    }
}

/// Elementwise sums `A + Ab, B + Bb, C + Cb, D + Db` governing the
/// conditional-mean dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct HattedSystem {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
}

/// Form the hatted (mean-dynamics) coefficients of a system.
pub fn hat_system(sys: &MfSystem) -> HattedSystem {
    HattedSystem {
        a_hat: &sys.a + &sys.a_bar,
        b_hat: &sys.b + &sys.b_bar,
        c_hat: &sys.c + &sys.c_bar,
        d_hat: &sys.d + &sys.d_bar,
    }
}

/// Quadratic cost weights. `q, q_bar` are `n x n` symmetric, `s, s_bar` are
/// `m x n` cross terms, `r, r_bar` are `m x m` symmetric. Symmetric inputs
/// are symmetrized on construction; use [`crate::linalg::relative_asymmetry`]
/// beforehand to detect material asymmetry worth warning about.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    q_bar: DMatrix<f64>,
    s: DMatrix<f64>,
    s_bar: DMatrix<f64>,
    r: DMatrix<f64>,
    r_bar: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(
        q: DMatrix<f64>,
        q_bar: DMatrix<f64>,
        s: DMatrix<f64>,
        s_bar: DMatrix<f64>,
        r: DMatrix<f64>,
        r_bar: DMatrix<f64>,
    ) -> Result<Self> {
        let n = linalg::square_dim(&q, "weight Q")?;
        let m = linalg::square_dim(&r, "weight R")?;
        if q_bar.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "weight Qbar: expected {n}x{n}, got {}x{}",
                q_bar.nrows(),
                q_bar.ncols()
            )));
        }
        if r_bar.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "weight Rbar: expected {m}x{m}, got {}x{}",
                r_bar.nrows(),
                r_bar.ncols()
            )));
        }
        for (mat, name) in [(&s, "S"), (&s_bar, "Sbar")] {
            if mat.shape() != (m, n) {
                return Err(Error::Dimension(format!(
                    "weight {name}: expected {m}x{n}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        Ok(CostWeights {
            q: symmetrize(&q),
            q_bar: symmetrize(&q_bar),
            s,
            s_bar,
            r: symmetrize(&r),
            r_bar: symmetrize(&r_bar),
        })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }
    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn q_bar(&self) -> &DMatrix<f64> {
        &self.q_bar
    }
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }
    pub fn s_bar(&self) -> &DMatrix<f64> {
        &self.s_bar
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn r_bar(&self) -> &DMatrix<f64> {
        &self.r_bar
    }

    pub fn q_hat(&self) -> DMatrix<f64> {
        &self.q + &self.q_bar
    }
    pub fn s_hat(&self) -> DMatrix<f64> {
        &self.s + &self.s_bar
    }
    pub fn r_hat(&self) -> DMatrix<f64> {
        &self.r + &self.r_bar
    }
}

/// Block-diagonal stacking of the plain and hatted weights:
/// `Q_blk = diag(Q, Q+Qb)` (2n x 2n), `S_blk = diag(S, S+Sb)` (2m x 2n),
/// `R_blk = diag(R, R+Rb)` (2m x 2m).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Assemble the block weights used by the joint definiteness condition.
pub fn block_weights(w: &CostWeights) -> BlockWeights {
    BlockWeights {
        q: block_diag(w.q(), &w.q_hat()),
        s: block_diag(w.s(), &w.s_hat()),
        r: block_diag(w.r(), &w.r_hat()),
    }
}

fn block_diag(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, c1) = top.shape();
    let (r2, c2) = bottom.shape();
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(top);
    out.view_mut((r1, c1), (r2, c2)).copy_from(bottom);
    out
}

/// Result of the joint positive-definiteness check on the block weights:
/// `R_blk` must be positive definite and so must the Schur-type reduction
/// `Q_blk - S_blkᵀ R_blk⁻¹ S_blk`.
#[derive(Debug, Clone)]
pub struct PdcReport {
    pub holds: bool,
    pub min_eig_r: f64,
    /// Smallest eigenvalue of the reduced Q-block; `None` when the R block
    /// is singular and the reduction cannot be formed.
    pub min_eig_schur: Option<f64>,
}

impl PdcReport {
    /// Promote a failed check to an error.
    pub fn require(&self) -> Result<()> {
        if self.holds {
            Ok(())
        } else {
            Err(Error::PdcViolated {
                min_eig_r: self.min_eig_r,
                min_eig_schur: self.min_eig_schur,
            })
        }
    }
}

/// Check the standard convexity condition on the block weights.
pub fn check_pdc(w: &CostWeights) -> PdcReport {
    let blk = block_weights(w);
    let min_eig_r = min_symmetric_eigenvalue(&blk.r);
    if !is_positive_definite(&blk.r) {
        return PdcReport {
            holds: false,
            min_eig_r,
            min_eig_schur: None,
        };
    }
    let r_inv_s = match blk.r.clone().cholesky() {
        Some(chol) => chol.solve(&blk.s),
        None => {
            return PdcReport {
                holds: false,
                min_eig_r,
                min_eig_schur: None,
            }
        }
    };
    let schur = &blk.q - blk.s.transpose() * r_inv_s;
    let min_eig_schur = min_symmetric_eigenvalue(&schur);
    PdcReport {
        holds: is_positive_definite(&schur),
        min_eig_r,
        min_eig_schur: Some(min_eig_schur),
    }
}

/// State-feedback gain pair: `u = K (X - E[X]) + Khat E[X]`.
/// Both blocks are `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    k: DMatrix<f64>,
    k_hat: DMatrix<f64>,
}

impl FeedbackGain {
    pub fn new(k: DMatrix<f64>, k_hat: DMatrix<f64>) -> Result<Self> {
        if k.shape() != k_hat.shape() {
            return Err(Error::Dimension(format!(
                "gain blocks must share a shape, got {}x{} and {}x{}",
                k.nrows(),
                k.ncols(),
                k_hat.nrows(),
                k_hat.ncols()
            )));
        }
        Ok(FeedbackGain { k, k_hat })
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn k_hat(&self) -> &DMatrix<f64> {
        &self.k_hat
    }

    /// The zero gain of the given shape (open-loop behaviour).
    pub fn zero(m: usize, n: usize) -> Self {
        FeedbackGain {
            k: DMatrix::zeros(m, n),
            k_hat: DMatrix::zeros(m, n),
        }
    }
}

/// A pair of symmetric matrices `(P, Phat)`; solution candidates for the
/// two coupled algebraic Riccati equations. Inputs are symmetrized on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiPair {
    p: DMatrix<f64>,
    p_hat: DMatrix<f64>,
}

impl RiccatiPair {
    pub fn new(p: DMatrix<f64>, p_hat: DMatrix<f64>) -> Result<Self> {
        let n = linalg::square_dim(&p, "P")?;
        if p_hat.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "Phat: expected {n}x{n}, got {}x{}",
                p_hat.nrows(),
                p_hat.ncols()
            )));
        }
        Ok(RiccatiPair {
            p: symmetrize(&p),
            p_hat: symmetrize(&p_hat),
        })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn p_hat(&self) -> &DMatrix<f64> {
        &self.p_hat
    }

    /// Whether both members are positive definite.
    pub fn is_positive_definite(&self) -> bool {
        is_positive_definite(&self.p) && is_positive_definite(&self.p_hat)
    }

    /// Frobenius distance per member to another pair.
    pub fn distance(&self, other: &RiccatiPair) -> (f64, f64) {
        ((&self.p - &other.p).norm(), (&self.p_hat - &other.p_hat).norm())
    }
}

/// Convenience constructor for scalar (n = m = 1) problems.
pub fn scalar_system(
    a: f64,
    a_bar: f64,
    b: f64,
    b_bar: f64,
    c: f64,
    c_bar: f64,
    d: f64,
    d_bar: f64,
) -> MfSystem {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    MfSystem::new(m(a), m(a_bar), m(b), m(b_bar), m(c), m(c_bar), m(d), m(d_bar))
        .expect("scalar dimensions are consistent")
}

/// Convenience constructor for scalar cost weights.
pub fn scalar_weights(q: f64, q_bar: f64, s: f64, s_bar: f64, r: f64, r_bar: f64) -> CostWeights {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    CostWeights::new(m(q), m(q_bar), m(s), m(s_bar), m(r), m(r_bar))
        .expect("scalar dimensions are consistent")
}

/// Convenience constructor for scalar gains.
pub fn scalar_gain(k: f64, k_hat: f64) -> FeedbackGain {
    FeedbackGain::new(
        DMatrix::from_element(1, 1, k),
        DMatrix::from_element(1, 1, k_hat),
    )
    .expect("scalar dimensions are consistent")
}

#[allow(unused)]
pub(crate) fn dvector(entries: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn hat_system_with_zero_bars_equals_plain_system() {
        let sys = scalar_system(-1.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.2, 0.0);
        let h = hat_system(&sys);
        assert_eq!(h.a_hat, *sys.a());
        assert_eq!(h.b_hat, *sys.b());
        assert_eq!(h.c_hat, *sys.c());
        assert_eq!(h.d_hat, *sys.d());
    }

    #[test]
    fn hat_system_sums_scalar_coefficients() {
        let sys = scalar_system(-1.0, 0.5, 1.0, -0.25, 0.0, 0.125, 0.0, -0.5);
        let h = hat_system(&sys);
        assert_eq!(h.a_hat[(0, 0)], -0.5);
        assert_eq!(h.b_hat[(0, 0)], 0.75);
        assert_eq!(h.c_hat[(0, 0)], 0.125);
        assert_eq!(h.d_hat[(0, 0)], -0.5);
    }

    #[test]
    fn hat_system_adds_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let m = 2;
        let mats: Vec<DMatrix<f64>> = vec![
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, m),
            random_matrix(&mut rng, n, m),
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, m),
            random_matrix(&mut rng, n, m),
        ];
        let sys = MfSystem::new(
            mats[0].clone(),
            mats[1].clone(),
            mats[2].clone(),
            mats[3].clone(),
            mats[4].clone(),
            mats[5].clone(),
            mats[6].clone(),
            mats[7].clone(),
        )
        .unwrap();
        let h = hat_system(&sys);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(h.a_hat[(i, j)], mats[0][(i, j)] + mats[1][(i, j)]);
                assert_eq!(h.c_hat[(i, j)], mats[4][(i, j)] + mats[5][(i, j)]);
            }
            for j in 0..m {
                assert_eq!(h.b_hat[(i, j)], mats[2][(i, j)] + mats[3][(i, j)]);
                assert_eq!(h.d_hat[(i, j)], mats[6][(i, j)] + mats[7][(i, j)]);
            }
        }
    }

    #[test]
    fn system_constructor_rejects_mismatched_shapes() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::<f64>::zeros(2, 1);
        let bad_c = DMatrix::<f64>::zeros(3, 3);
        let err = MfSystem::new(
            a.clone(),
            a.clone(),
            b.clone(),
            b.clone(),
            bad_c,
            a.clone(),
            b.clone(),
            b,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn weights_are_symmetrized_on_construction() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1, 2.0]);
        let w = CostWeights::new(
            q,
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert_eq!(w.q()[(0, 1)], 0.2);
        assert_eq!(w.q()[(1, 0)], 0.2);
    }

    #[test]
    fn block_weights_on_scalar_problem() {
        // Q = 1, Qbar = 0.5 -> diag(1, 1.5)
        let w = scalar_weights(1.0, 0.5, 0.0, 0.0, 1.0, 0.0);
        let blk = block_weights(&w);
        assert_eq!(blk.q, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.5]));
        assert_eq!(blk.r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn block_weights_duplicate_plain_blocks_when_bars_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_matrix(&mut rng, 2, 2);
        let w = CostWeights::new(
            q.clone(),
            DMatrix::zeros(2, 2),
            random_matrix(&mut rng, 1, 2),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let blk = block_weights(&w);
        let qs = crate::linalg::symmetrize(&q);
        assert_relative_eq!(blk.q.view((0, 0), (2, 2)).clone_owned(), qs);
        assert_relative_eq!(blk.q.view((2, 2), (2, 2)).clone_owned(), qs);
    }

    #[test]
    fn block_weights_assemble_off_diagonal_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 2;
        let m = 2;
        let w = CostWeights::new(
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, m, n),
            random_matrix(&mut rng, m, n),
            random_matrix(&mut rng, m, m),
            random_matrix(&mut rng, m, m),
        )
        .unwrap();
        let blk = block_weights(&w);
        assert_eq!(blk.q.shape(), (2 * n, 2 * n));
        assert_eq!(blk.s.shape(), (2 * m, 2 * n));
        assert_eq!(blk.r.shape(), (2 * m, 2 * m));
        assert_eq!(blk.s.view((0, n), (m, n)).norm(), 0.0);
        assert_eq!(blk.s.view((m, 0), (m, n)).norm(), 0.0);
        assert_relative_eq!(
            blk.s.view((m, n), (m, n)).clone_owned(),
            w.s_hat(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn pdc_holds_for_identity_weights() {
        let w = scalar_weights(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let report = check_pdc(&w);
        assert!(report.holds);
        assert_relative_eq!(report.min_eig_r, 1.0);
        assert_relative_eq!(report.min_eig_schur.unwrap(), 1.0);
        assert!(report.require().is_ok());
    }

    #[test]
    fn pdc_schur_complement_value_for_scalar_cross_term() {
        // Q = R = 1, S = 0.9: reduced block is 1 - 0.81 = 0.19.
        let w = scalar_weights(1.0, 0.0, 0.9, 0.0, 1.0, 0.0);
        let report = check_pdc(&w);
        assert!(report.holds);
        assert_relative_eq!(report.min_eig_schur.unwrap(), 0.19, epsilon = 1e-12);
    }

    #[test]
    fn pdc_fails_for_indefinite_r() {
        let w = scalar_weights(1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let report = check_pdc(&w);
        assert!(!report.holds);
        assert!(report.min_eig_schur.is_none());
        assert!(matches!(
            report.require(),
            Err(Error::PdcViolated { .. })
        ));
    }

    #[test]
    fn pdc_fails_on_boundary_q() {
        // Q = 0 makes the reduced block exactly singular.
        let w = scalar_weights(0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert!(!check_pdc(&w).holds);
    }

    #[test]
    fn pdc_fails_when_cross_term_dominates() {
        let w = scalar_weights(1.0, 0.0, 1.1, 0.0, 1.0, 0.0);
        let report = check_pdc(&w);
        assert!(!report.holds);
        assert!(report.min_eig_schur.unwrap() < 0.0);
    }

    #[test]
    fn riccati_pair_is_symmetrized() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.2, 1.0]);
        let pair = RiccatiPair::new(p.clone(), p).unwrap();
        assert_eq!(pair.p()[(0, 1)], pair.p()[(1, 0)]);
    }

    #[test]
    fn riccati_pair_definiteness_and_distance() {
        let pair = RiccatiPair::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert!(pair.is_positive_definite());
        let other = RiccatiPair::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (dp, dphat) = pair.distance(&other);
        assert_relative_eq!(dp, 2.0_f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(dphat, 0.0);
    }

    #[test]
    fn zero_gain_has_requested_shape() {
        let g = FeedbackGain::zero(2, 3);
        assert_eq!(g.k().shape(), (2, 3));
        assert_eq!(g.k_hat().norm(), 0.0);
    }
}
