//! Exact Lyapunov solvers for the closed-loop coefficient matrices, and the
//! mean-square stabilizer test built on them.
//!
//! Closing the loop with `u = K (X - E[X]) + Khat E[X]` leaves two linear
//! equations per policy evaluation: a stochastic Lyapunov equation
//! `AᵀP + PA + CᵀPC + L = 0` for the fluctuation part and a deterministic
//! one `ÂᵀP̂ + P̂Â + L̂ = 0` for the mean part. Both are solved exactly by
//! vectorizing into a dense `n² x n²` Kronecker system — for the state
//! dimensions this toolkit targets, direct LU on that system is cheap and
//! has no iteration error to track.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{is_positive_definite, kcal, kron, symmetrize, unvec, vec};
use crate::model::{hat_system, FeedbackGain, MfSystem, RiccatiPair};

/// Residual acceptance factor for the exact solves, relative to the scale
/// `|L|_F + |P|_F (2|A|_F + |C|_F²)` of the equation.
pub const LYAP_RESIDUAL_TOL: f64 = 1e-10;

/// Closed-loop coefficients under a feedback gain pair:
/// `A + BK`, `C + DK` for the fluctuation dynamics and
/// `Â + B̂K̂`, `Ĉ + D̂K̂` for the mean dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMatrices {
    pub a_cl: DMatrix<f64>,
    pub c_cl: DMatrix<f64>,
    pub a_hat_cl: DMatrix<f64>,
    pub c_hat_cl: DMatrix<f64>,
}

/// Close the loop of `sys` under `gain`.
pub fn closed_loop(sys: &MfSystem, gain: &FeedbackGain) -> Result<ClosedLoopMatrices> {
    if gain.k().shape() != (sys.m(), sys.n()) {
        return Err(Error::Dimension(format!(
            "gain shape {}x{} does not match system with m = {}, n = {}",
            gain.k().nrows(),
            gain.k().ncols(),
            sys.m(),
            sys.n()
        )));
    }
    let hat = hat_system(sys);
    Ok(ClosedLoopMatrices {
        a_cl: sys.a() + sys.b() * gain.k(),
        c_cl: sys.c() + sys.d() * gain.k(),
        a_hat_cl: &hat.a_hat + &hat.b_hat * gain.k_hat(),
        c_hat_cl: &hat.c_hat + &hat.d_hat * gain.k_hat(),
    })
}

/// Solve `AᵀP + PA + CᵀPC + L = 0` for symmetric `P`.
///
/// The equation is vectorized to `(I (x) Aᵀ + Aᵀ (x) I + Cᵀ (x) Cᵀ) vec(P)
/// = -vec(L)` and solved by dense LU; the result is symmetrized and the
/// back-substituted residual is verified against [`LYAP_RESIDUAL_TOL`].
pub fn solve_stochastic_lyapunov(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = check_square_same("stochastic Lyapunov", &[a, c, lambda])?;
    let eye = DMatrix::identity(n, n);
    let at = a.transpose();
    let op = kron(&eye, &at) + kron(&at, &eye) + kcal(c);
    solve_vectorized(op, a, Some(c), lambda)
}

/// Solve `ÂᵀP̂ + P̂Â + L̂ = 0` for symmetric `P̂`.
pub fn solve_deterministic_lyapunov(
    a_hat: &DMatrix<f64>,
    lambda_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = check_square_same("deterministic Lyapunov", &[a_hat, lambda_hat])?;
    let eye = DMatrix::identity(n, n);
    let at = a_hat.transpose();
    let op = kron(&eye, &at) + kron(&at, &eye);
    solve_vectorized(op, a_hat, None, lambda_hat)
}

fn solve_vectorized(
    op: DMatrix<f64>,
    a: &DMatrix<f64>,
    c: Option<&DMatrix<f64>>,
    lambda: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let rhs = -vec(lambda);
    let solution = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotSolvable("singular Lyapunov operator".into()))?;
    let p = symmetrize(&unvec(&solution, n, n)?);

    let mut residual = a.transpose() * &p + &p * a + lambda;
    let mut c_norm_sq = 0.0;
    if let Some(c) = c {
        residual += c.transpose() * &p * c;
        c_norm_sq = c.norm() * c.norm();
    }
    let scale = lambda.norm() + p.norm() * (2.0 * a.norm() + c_norm_sq);
    if residual.norm() > LYAP_RESIDUAL_TOL * scale {
        return Err(Error::NotSolvable(format!(
            "Lyapunov residual {:.3e} exceeds {:.3e}; system is too ill-conditioned",
            residual.norm(),
            LYAP_RESIDUAL_TOL * scale
        )));
    }
    Ok(p)
}

/// Outcome of the mean-square stabilizer test.
#[derive(Debug, Clone)]
pub struct StabilizerCheck {
    pub is_stabilizer: bool,
    /// Positive-definite Lyapunov certificates `(P, P̂)` when the gain
    /// stabilizes.
    pub witness: Option<RiccatiPair>,
    /// Diagnostic when it does not.
    pub reason: Option<String>,
}

/// Test whether `gain` stabilizes `sys` in the mean-square sense: both
/// closed-loop Lyapunov equations with identity right-hand side must admit
/// positive-definite solutions.
pub fn is_stabilizer(sys: &MfSystem, gain: &FeedbackGain) -> Result<StabilizerCheck> {
    let cl = closed_loop(sys, gain)?;
    let eye = DMatrix::identity(sys.n(), sys.n());

    let p = match solve_stochastic_lyapunov(&cl.a_cl, &cl.c_cl, &eye) {
        Ok(p) => p,
        Err(e) => {
            return Ok(StabilizerCheck {
                is_stabilizer: false,
                witness: None,
                reason: Some(format!("fluctuation Lyapunov equation unsolvable: {e}")),
            })
        }
    };
    if !is_positive_definite(&p) {
        return Ok(StabilizerCheck {
            is_stabilizer: false,
            witness: None,
            reason: Some(
                "fluctuation certificate is not positive definite (mean-square unstable)".into(),
            ),
        });
    }

    let p_hat = match solve_deterministic_lyapunov(&cl.a_hat_cl, &eye) {
        Ok(p) => p,
        Err(e) => {
            return Ok(StabilizerCheck {
                is_stabilizer: false,
                witness: None,
                reason: Some(format!("mean Lyapunov equation unsolvable: {e}")),
            })
        }
    };
    if !is_positive_definite(&p_hat) {
        return Ok(StabilizerCheck {
            is_stabilizer: false,
            witness: None,
            reason: Some("mean certificate is not positive definite (mean dynamics unstable)".into()),
        });
    }

    Ok(StabilizerCheck {
        is_stabilizer: true,
        witness: Some(RiccatiPair::new(p, p_hat)?),
        reason: None,
    })
}

fn check_square_same(what: &str, mats: &[&DMatrix<f64>]) -> Result<usize> {
    let n = mats[0].nrows();
    for m in mats {
        if m.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "{what}: all matrices must be {n}x{n}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_gain, scalar_system};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    /// A random matrix with spectral abscissa pushed below `-margin`.
    fn random_stable(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let max_re = g
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        &g - DMatrix::identity(n, n) * (max_re + margin)
    }

    #[test]
    fn scalar_stochastic_solution_matches_closed_form() {
        // (2a + c^2) p = -1 with a = -1, c = 0.5 -> p = 1 / 1.75 = 4/7.
        let p = solve_stochastic_lyapunov(&scalar(-1.0), &scalar(0.5), &scalar(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 7.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_right_hand_side_gives_zero_solution() {
        let p = solve_stochastic_lyapunov(&scalar(-1.0), &scalar(0.5), &scalar(0.0)).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        let p_hat = solve_deterministic_lyapunov(&scalar(-2.0), &scalar(0.0)).unwrap();
        assert_eq!(p_hat[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_deterministic_solution_matches_closed_form() {
        // 2 a p = -1 with a = -2 -> p = 0.25.
        let p = solve_deterministic_lyapunov(&scalar(-2.0), &scalar(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn random_stable_system_gives_positive_definite_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_stable(&mut rng, 3, 1.0);
        let c = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.3..0.3));
        let lambda = DMatrix::identity(3, 3);
        let p = solve_stochastic_lyapunov(&a, &c, &lambda).unwrap();
        assert!(is_positive_definite(&p));
        let residual = a.transpose() * &p + &p * &a + c.transpose() * &p * &c + &lambda;
        assert!(residual.norm() < 1e-11 * p.norm().max(1.0));
    }

    #[test]
    fn solver_is_linear_in_the_right_hand_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = random_stable(&mut rng, 3, 1.0);
        let c = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.2..0.2));
        let l1 = crate::linalg::symmetrize(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)));
        let l2 = crate::linalg::symmetrize(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)));
        let p1 = solve_stochastic_lyapunov(&a, &c, &l1).unwrap();
        let p2 = solve_stochastic_lyapunov(&a, &c, &l2).unwrap();
        let p12 = solve_stochastic_lyapunov(&a, &c, &(&l1 + &l2)).unwrap();
        assert_relative_eq!(&p1 + &p2, p12, epsilon = 1e-11);
    }

    #[test]
    fn solution_grows_with_the_right_hand_side() {
        // L1 - L2 positive semidefinite forces P1 - P2 positive semidefinite.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_stable(&mut rng, 3, 1.0);
        let c = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.2..0.2));
        let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let l2 = DMatrix::identity(3, 3);
        let l1 = &l2 + &g * g.transpose();
        let p1 = solve_stochastic_lyapunov(&a, &c, &l1).unwrap();
        let p2 = solve_stochastic_lyapunov(&a, &c, &l2).unwrap();
        assert!(crate::linalg::is_positive_semidefinite(&(&p1 - &p2), 1e-10));
    }

    #[test]
    fn singular_operator_is_reported() {
        // Scalar operator 2a + c^2 = 0 for a = -0.5, c = 1.
        let err = solve_stochastic_lyapunov(&scalar(-0.5), &scalar(1.0), &scalar(1.0));
        assert!(matches!(err, Err(Error::NotSolvable(_))));
    }

    #[test]
    fn unstable_system_yields_indefinite_solution_not_error() {
        // The vectorized system is still regular; stability shows up in the
        // sign of the solution, which the stabilizer test inspects.
        let p = solve_stochastic_lyapunov(&scalar(1.0), &scalar(0.0), &scalar(1.0)).unwrap();
        assert_relative_eq!(p[(0, 0)], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_random_hurwitz_solution_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random_stable(&mut rng, 4, 0.5);
        let p = solve_deterministic_lyapunov(&a, &DMatrix::identity(4, 4)).unwrap();
        assert!(is_positive_definite(&p));
        let residual = a.transpose() * &p + &p * &a + DMatrix::identity(4, 4);
        assert!(residual.norm() < 1e-10 * (1.0 + 2.0 * a.norm() * p.norm()));
    }

    #[test]
    fn closed_loop_combines_gain_blocks() {
        let sys = scalar_system(-1.0, 0.5, 2.0, 1.0, 0.25, 0.25, 0.5, 0.5);
        let gain = scalar_gain(-2.0, -1.0);
        let cl = closed_loop(&sys, &gain).unwrap();
        assert_relative_eq!(cl.a_cl[(0, 0)], -1.0 + 2.0 * -2.0);
        assert_relative_eq!(cl.c_cl[(0, 0)], 0.25 + 0.5 * -2.0);
        assert_relative_eq!(cl.a_hat_cl[(0, 0)], -0.5 + 3.0 * -1.0);
        assert_relative_eq!(cl.c_hat_cl[(0, 0)], 0.5 + 1.0 * -1.0);
    }

    #[test]
    fn stable_scalar_system_passes_stabilizer_test_with_witness() {
        let sys = scalar_system(-1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let check = is_stabilizer(&sys, &FeedbackGain::zero(1, 1)).unwrap();
        assert!(check.is_stabilizer);
        let w = check.witness.unwrap();
        // 2(-1)p + 1 = 0 on both the fluctuation and the mean equation.
        assert_relative_eq!(w.p()[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(w.p_hat()[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn unstable_drift_fails_stabilizer_test() {
        let sys = scalar_system(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let check = is_stabilizer(&sys, &FeedbackGain::zero(1, 1)).unwrap();
        assert!(!check.is_stabilizer);
        assert!(check.witness.is_none());
        assert!(check.reason.unwrap().contains("fluctuation"));
    }

    #[test]
    fn strong_noise_destroys_mean_square_stability() {
        // a = -0.1 is stable in the mean, but 2a + c^2 = 0.8 > 0 blows up
        // the second moment.
        let sys = scalar_system(-0.1, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let check = is_stabilizer(&sys, &FeedbackGain::zero(1, 1)).unwrap();
        assert!(!check.is_stabilizer);
    }

    #[test]
    fn unstable_mean_dynamics_fail_the_hat_equation() {
        // A = -1 is fine; Abar = 2 makes A + Abar = 1 unstable.
        let sys = scalar_system(-1.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let check = is_stabilizer(&sys, &FeedbackGain::zero(1, 1)).unwrap();
        assert!(!check.is_stabilizer);
        assert!(check.reason.unwrap().contains("mean"));
    }

    #[test]
    fn stabilizing_gain_flips_the_verdict() {
        let sys = scalar_system(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let gain = scalar_gain(-2.0, -2.0);
        let check = is_stabilizer(&sys, &gain).unwrap();
        assert!(check.is_stabilizer);
        assert!(check.witness.unwrap().is_positive_definite());
    }

    #[test]
    fn multivariate_witness_solves_both_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let n = 3;
        let a = random_stable(&mut rng, n, 1.0);
        let sys = MfSystem::new(
            a,
            DMatrix::zeros(n, n),
            DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::zeros(n, 1),
            DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.2..0.2)),
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, 1),
            DMatrix::zeros(n, 1),
        )
        .unwrap();
        let check = is_stabilizer(&sys, &FeedbackGain::zero(1, n)).unwrap();
        assert!(check.is_stabilizer);
        let w = check.witness.unwrap();
        let cl = closed_loop(&sys, &FeedbackGain::zero(1, n)).unwrap();
        let res = cl.a_cl.transpose() * w.p()
            + w.p() * &cl.a_cl
            + cl.c_cl.transpose() * w.p() * &cl.c_cl
            + DMatrix::identity(n, n);
        assert!(res.norm() < 1e-10);
    }

    #[test]
    fn rejects_mismatched_gain_shape() {
        let sys = scalar_system(-1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let gain = FeedbackGain::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            closed_loop(&sys, &gain),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn witness_scales_with_wider_state() {
        // Identity-weighted certificates for diag(-1, -4) are diag(1/2, 1/8).
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -4.0]));
        let p = solve_deterministic_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(p[(1, 1)], 0.125, epsilon = 1e-14);
        assert_relative_eq!(p[(0, 1)], 0.0, epsilon = 1e-15);
    }
}
