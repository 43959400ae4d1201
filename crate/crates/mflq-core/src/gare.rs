//! The pair of generalized algebraic Riccati equations (GAREs)
//! characterizing optimal mean-field LQ feedback, and the model-based
//! policy-iteration solver for them.
//!
//! With `H = DᵀPD + R` and `Ĥ = D̂ᵀPD̂ + R̂` (note: both weight the *plain*
//! `P`), the equations for the fluctuation part `P` and the mean part `P̂`
//! read
//!
//! ```text
//! AᵀP + PA + CᵀPC + Q - (PB + CᵀPD + Sᵀ) H⁻¹ (BᵀP + DᵀPC + S) = 0
//! ÂᵀP̂ + P̂Â + ĈᵀPĈ + Q̂ - (P̂B̂ + ĈᵀPD̂ + Ŝᵀ) Ĥ⁻¹ (B̂ᵀP̂ + D̂ᵀPĈ + Ŝ) = 0
//! ```
//!
//! Policy iteration alternates an exact evaluation — two closed-loop
//! Lyapunov solves per gain — with the gain improvement
//! `K = -H⁻¹(BᵀP + DᵀPC + S)`, `K̂ = -Ĥ⁻¹(B̂ᵀP̂ + D̂ᵀPĈ + Ŝ)`. Starting
//! from any stabilizer, the evaluated pairs decrease monotonically (in the
//! semidefinite order) to the stabilizing solution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::is_positive_definite;
use crate::lyapunov::{
    closed_loop, is_stabilizer, solve_deterministic_lyapunov, solve_stochastic_lyapunov,
};
use crate::model::{check_pdc, hat_system, CostWeights, FeedbackGain, MfSystem, RiccatiPair};

/// Default stopping threshold on `|P_next - P|_F` for the exact solver.
pub const MODEL_EPSILON: f64 = 1e-9;
/// Default iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Residual acceptance factor: a solution must satisfy
/// `|residual|_F <= GARE_TOL_FACTOR * (1 + |Q|_F)`.
pub const GARE_TOL_FACTOR: f64 = 1e-8;

/// Both Riccati residuals evaluated at a candidate pair, together with
/// flags for the positivity of the inner weighting matrices.
#[derive(Debug, Clone)]
pub struct GareResiduals {
    /// Residual of the fluctuation equation.
    pub r: DMatrix<f64>,
    /// Residual of the mean equation.
    pub r_hat: DMatrix<f64>,
    /// Whether `DᵀPD + R` is positive definite.
    pub inner_pd: bool,
    /// Whether `D̂ᵀPD̂ + R̂` is positive definite.
    pub inner_hat_pd: bool,
}

impl GareResiduals {
    pub fn norms(&self) -> (f64, f64) {
        (self.r.norm(), self.r_hat.norm())
    }
}

struct InnerTerms {
    /// `DᵀPD + R`.
    h: DMatrix<f64>,
    /// `BᵀP + DᵀPC + S`.
    g: DMatrix<f64>,
    /// `D̂ᵀPD̂ + R̂`.
    h_hat: DMatrix<f64>,
    /// `B̂ᵀP̂ + D̂ᵀPĈ + Ŝ`.
    g_hat: DMatrix<f64>,
}

fn inner_terms(sys: &MfSystem, w: &CostWeights, pair: &RiccatiPair) -> InnerTerms {
    let hat = hat_system(sys);
    let p = pair.p();
    let p_hat = pair.p_hat();
    InnerTerms {
        h: sys.d().transpose() * p * sys.d() + w.r(),
        g: sys.b().transpose() * p + sys.d().transpose() * p * sys.c() + w.s(),
        h_hat: hat.d_hat.transpose() * p * &hat.d_hat + w.r_hat(),
        g_hat: hat.b_hat.transpose() * p_hat
            + hat.d_hat.transpose() * p * &hat.c_hat
            + w.s_hat(),
    }
}

fn check_problem(sys: &MfSystem, w: &CostWeights) -> Result<()> {
    if sys.n() != w.n() || sys.m() != w.m() {
        return Err(Error::Dimension(format!(
            "system has n = {}, m = {} but weights have n = {}, m = {}",
            sys.n(),
            sys.m(),
            w.n(),
            w.m()
        )));
    }
    Ok(())
}

/// Evaluate both Riccati residuals at `pair`. The inner matrices must be
/// invertible; definiteness is only reported through the flags.
pub fn gare_residuals(sys: &MfSystem, w: &CostWeights, pair: &RiccatiPair) -> Result<GareResiduals> {
    check_problem(sys, w)?;
    if pair.n() != sys.n() {
        return Err(Error::Dimension(format!(
            "pair dimension {} does not match system dimension {}",
            pair.n(),
            sys.n()
        )));
    }
    let hat = hat_system(sys);
    let t = inner_terms(sys, w, pair);
    let p = pair.p();
    let p_hat = pair.p_hat();

    let h_inv_g = t
        .h
        .clone()
        .lu()
        .solve(&t.g)
        .ok_or_else(|| Error::SingularInnerTerm("DᵀPD + R is singular".into()))?;
    let r = sys.a().transpose() * p
        + p * sys.a()
        + sys.c().transpose() * p * sys.c()
        + w.q()
        - t.g.transpose() * h_inv_g;

    let h_hat_inv_g = t
        .h_hat
        .clone()
        .lu()
        .solve(&t.g_hat)
        .ok_or_else(|| Error::SingularInnerTerm("D̂ᵀPD̂ + R̂ is singular".into()))?;
    let r_hat = hat.a_hat.transpose() * p_hat
        + p_hat * &hat.a_hat
        + hat.c_hat.transpose() * p * &hat.c_hat
        + w.q_hat()
        - t.g_hat.transpose() * h_hat_inv_g;

    Ok(GareResiduals {
        r,
        r_hat,
        inner_pd: is_positive_definite(&t.h),
        inner_hat_pd: is_positive_definite(&t.h_hat),
    })
}

/// Improve a gain pair from a Riccati pair:
/// `K = -(DᵀPD + R)⁻¹ (BᵀP + DᵀPC + S)` and the hatted analogue. Requires
/// both inner matrices to be positive definite.
pub fn gains_from(sys: &MfSystem, w: &CostWeights, pair: &RiccatiPair) -> Result<FeedbackGain> {
    check_problem(sys, w)?;
    let hat = hat_system(sys);
    gains_from_coeffs(
        sys.b(),
        sys.c(),
        sys.d(),
        &hat.b_hat,
        &hat.c_hat,
        &hat.d_hat,
        w,
        pair,
    )
}

/// Shared improvement formula over explicit coefficient references. The
/// trajectory-driven route calls this through its drift-free coefficient
/// view, so both routes produce the same gains for the same pair, bit for
/// bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gains_from_coeffs(
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    c_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    w: &CostWeights,
    pair: &RiccatiPair,
) -> Result<FeedbackGain> {
    let p = pair.p();
    let p_hat = pair.p_hat();
    let h = d.transpose() * p * d + w.r();
    let g = b.transpose() * p + d.transpose() * p * c + w.s();
    let h_hat = d_hat.transpose() * p * d_hat + w.r_hat();
    let g_hat = b_hat.transpose() * p_hat + d_hat.transpose() * p * c_hat + w.s_hat();
    let k = -&solve_pd(&h, &g, "DᵀPD + R")?;
    let k_hat = -&solve_pd(&h_hat, &g_hat, "D̂ᵀPD̂ + R̂")?;
    FeedbackGain::new(k, k_hat)
}

fn solve_pd(h: &DMatrix<f64>, rhs: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let chol: Cholesky<f64, Dyn> = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularInnerTerm(format!("{label} is not positive definite")))?;
    Ok(chol.solve(rhs))
}

/// One exact policy-evaluation step: solve the two closed-loop Lyapunov
/// equations for the given stabilizing gain.
///
/// The fluctuation equation uses `L = KᵀRK + SᵀK + KᵀS + Q`; the mean
/// equation uses the hatted weights plus the diffusion carry-over term
/// `(Ĉ + D̂K̂)ᵀ P_next (Ĉ + D̂K̂)` involving the freshly computed `P_next`.
pub fn lyapunov_recursion_step(
    sys: &MfSystem,
    w: &CostWeights,
    gain: &FeedbackGain,
) -> Result<RiccatiPair> {
    check_problem(sys, w)?;
    let check = is_stabilizer(sys, gain)?;
    if !check.is_stabilizer {
        return Err(Error::NotStabilizer(
            check.reason.unwrap_or_else(|| "gain fails the Lyapunov test".into()),
        ));
    }
    let cl = closed_loop(sys, gain)?;
    let k = gain.k();
    let k_hat = gain.k_hat();

    let lambda = k.transpose() * w.r() * k + w.s().transpose() * k + k.transpose() * w.s() + w.q();
    let p_next = solve_stochastic_lyapunov(&cl.a_cl, &cl.c_cl, &lambda)?;

    let s_hat = w.s_hat();
    let lambda_hat = k_hat.transpose() * w.r_hat() * k_hat
        + s_hat.transpose() * k_hat
        + k_hat.transpose() * &s_hat
        + w.q_hat()
        + cl.c_hat_cl.transpose() * &p_next * &cl.c_hat_cl;
    let p_hat_next = solve_deterministic_lyapunov(&cl.a_hat_cl, &lambda_hat)?;

    RiccatiPair::new(p_next, p_hat_next)
}

/// One policy-iteration comparison: the freshly evaluated pair, the gain
/// improved from it, the Frobenius distances to the previous pair, and the
/// Riccati residual norms of the new pair.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based comparison index.
    pub index: usize,
    pub pair: RiccatiPair,
    pub gain: FeedbackGain,
    pub delta_p: f64,
    pub delta_phat: f64,
    pub resid_p: f64,
    pub resid_phat: f64,
}

/// Result of a policy-iteration run (either route).
#[derive(Debug, Clone)]
pub struct GareSolution {
    /// Converged Riccati pair.
    pub pair: RiccatiPair,
    /// Gain improved from the converged pair.
    pub gain: FeedbackGain,
    /// Pair evaluated from the starting gain, before the first comparison.
    pub initial_pair: RiccatiPair,
    /// Gain improved from `initial_pair`.
    pub initial_gain: FeedbackGain,
    /// One record per comparison, in order.
    pub history: Vec<IterationRecord>,
    /// Non-fatal diagnostics collected along the run.
    pub warnings: Vec<String>,
}

impl GareSolution {
    /// Number of comparisons performed.
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// All evaluated pairs in order, starting with the initial evaluation.
    pub fn pair_sequence(&self) -> Vec<&RiccatiPair> {
        std::iter::once(&self.initial_pair)
            .chain(self.history.iter().map(|r| &r.pair))
            .collect()
    }

    /// All improved gains in order, starting with the initial improvement.
    pub fn gain_sequence(&self) -> Vec<&FeedbackGain> {
        std::iter::once(&self.initial_gain)
            .chain(self.history.iter().map(|r| &r.gain))
            .collect()
    }
}

/// Solve the GARE pair by exact policy iteration.
///
/// `gain0` must stabilize the system; when omitted, the zero gain is tried
/// (it works exactly when the open loop is already mean-square stable).
/// Iteration stops once both Frobenius increments fall below `epsilon`;
/// the converged pair is verified against the Riccati residual bound
/// `GARE_TOL_FACTOR * (1 + |Q|_F)`.
pub fn solve_gare_model_based(
    sys: &MfSystem,
    w: &CostWeights,
    gain0: Option<&FeedbackGain>,
    epsilon: f64,
    max_iter: usize,
) -> Result<GareSolution> {
    check_problem(sys, w)?;
    if !(epsilon > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput(
            "epsilon must be positive and max_iter nonzero".into(),
        ));
    }
    check_pdc(w).require()?;

    let start = match gain0 {
        Some(g) => g.clone(),
        None => FeedbackGain::zero(sys.m(), sys.n()),
    };

    let initial_pair = lyapunov_recursion_step(sys, w, &start)?;
    let initial_gain = gains_from(sys, w, &initial_pair)?;
    let mut prev_pair = initial_pair.clone();
    let mut prev_gain = initial_gain.clone();
    let mut history: Vec<IterationRecord> = Vec::new();

    for index in 1..=max_iter {
        let pair = lyapunov_recursion_step(sys, w, &prev_gain)?;
        let gain = gains_from(sys, w, &pair)?;
        let (delta_p, delta_phat) = pair.distance(&prev_pair);
        let res = gare_residuals(sys, w, &pair)?;
        let (resid_p, resid_phat) = res.norms();
        history.push(IterationRecord {
            index,
            pair: pair.clone(),
            gain: gain.clone(),
            delta_p,
            delta_phat,
            resid_p,
            resid_phat,
        });
        prev_pair = pair;
        prev_gain = gain;

        if delta_p < epsilon && delta_phat < epsilon {
            let bound = GARE_TOL_FACTOR * (1.0 + w.q().norm());
            if resid_p > bound || resid_phat > bound {
                return Err(Error::NotSolvable(format!(
                    "iteration converged but residuals ({resid_p:.3e}, {resid_phat:.3e}) \
                     exceed the acceptance bound {bound:.3e}"
                )));
            }
            return Ok(GareSolution {
                pair: prev_pair,
                gain: prev_gain,
                initial_pair,
                initial_gain,
                history,
                warnings: Vec::new(),
            });
        }
    }

    let last = history.last().expect("max_iter >= 1");
    Err(Error::MaxIterationsExceeded {
        limit: max_iter,
        delta_p: last.delta_p,
        delta_phat: last.delta_phat,
    })
}

/// Optimal value `V(x) = xᵀ P̂ x` of starting the controlled process at the
/// deterministic state `x`.
pub fn value_function(pair: &RiccatiPair, x: &DVector<f64>) -> Result<f64> {
    if x.len() != pair.n() {
        return Err(Error::Dimension(format!(
            "state of length {} does not match pair dimension {}",
            x.len(),
            pair.n()
        )));
    }
    Ok((x.transpose() * pair.p_hat() * x)[0])
}

/// Feedback law `u = K (x - x_mean) + K̂ x_mean`.
pub fn optimal_control(
    gain: &FeedbackGain,
    x: &DVector<f64>,
    x_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = gain.k().ncols();
    if x.len() != n || x_mean.len() != n {
        return Err(Error::Dimension(format!(
            "states of length {}, {} do not match gain with n = {n}",
            x.len(),
            x_mean.len()
        )));
    }
    Ok(gain.k() * (x - x_mean) + gain.k_hat() * x_mean)
}
