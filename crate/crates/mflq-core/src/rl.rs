//! Trajectory-driven policy iteration: the partially model-free route to
//! the Riccati pair.
//!
//! Instead of solving the coupled Riccati equations, each iteration
//! simulates the closed loop under the current gain from `N` initial
//! states, evaluates two objective functionals on the sampled ensembles —
//!
//! ```text
//! 𝒥₀(x_j) = E ∫ ⟨(Q + 2SᵀK + KᵀRK)(X - X̄), X - X̄⟩ ds
//! 𝒥(x_j)  = 𝒥₀(x_j) + ∫ ⟨(Q̂ + 2ŜᵀK̂ + K̂ᵀR̂K̂)X̄, X̄⟩ ds
//! ```
//!
//! — and recovers the pair from the two independent least-squares
//! identities `∫⟨P(Ĉ+D̂K̂)X̄, (Ĉ+D̂K̂)X̄⟩ds = 𝒥₀` and `⟨P̂x_j, x_j⟩ = 𝒥`,
//! written in half-vectorized Kronecker form. Gains are then improved
//! exactly as in the model-based route.
//!
//! The evaluation/improvement path reads only a [`ModelFreeView`] — the
//! input and diffusion coefficients `B, B̄, C, C̄, D, D̄` — and never the
//! drift matrices `A, Ā`: the drift information enters solely through the
//! simulated trajectories. The full system appears in
//! [`run_policy_iteration`] only as the simulation environment.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gare::{gains_from_coeffs, gare_residuals, GareSolution, IterationRecord};
use crate::linalg::{kcal_vec_into, lstsq, numerical_rank, quad_form, unvec_plus, DuplicationMatrix};
use crate::model::{check_pdc, CostWeights, FeedbackGain, MfSystem, RiccatiPair};
use crate::sim::{decay_from_curve, scan_closed_loop, SimGrid, TrajectoryBundle, DEFAULT_PATHS};

/// Default stopping threshold on the Frobenius increments for data-driven
/// runs; looser than the model-based default because the iterates carry
/// Monte Carlo noise.
pub const RL_EPSILON: f64 = 1e-3;
/// Default iteration cap.
pub const RL_MAX_ITERATIONS: usize = 100;
/// Default per-coordinate sampling range for the initial states.
pub const DEFAULT_STATE_RANGE: (f64, f64) = (0.0, 20.0);

/// Default number of initial states: enough rows for the half-vectorized
/// least-squares systems plus slack.
pub fn default_state_count(n: usize) -> usize {
    (n * (n + 1) / 2 + 5).max(15)
}

/// The coefficients the trajectory-driven route is allowed to read. There
/// are no drift fields: code that only holds a view cannot touch `A` or
/// `Ā` even in principle.
#[derive(Debug, Clone)]
pub struct ModelFreeView {
    b: DMatrix<f64>,
    b_bar: DMatrix<f64>,
    c: DMatrix<f64>,
    c_bar: DMatrix<f64>,
    d: DMatrix<f64>,
    d_bar: DMatrix<f64>,
}

impl ModelFreeView {
    pub fn new(
        b: DMatrix<f64>,
        b_bar: DMatrix<f64>,
        c: DMatrix<f64>,
        c_bar: DMatrix<f64>,
        d: DMatrix<f64>,
        d_bar: DMatrix<f64>,
    ) -> Result<Self> {
        let n = b.nrows();
        let m = b.ncols();
        if m == 0 || n == 0 {
            return Err(Error::Dimension("B must be a nonempty n×m matrix".into()));
        }
        let checks = [
            ("Bbar", b_bar.shape(), (n, m)),
            ("C", c.shape(), (n, n)),
            ("Cbar", c_bar.shape(), (n, n)),
            ("D", d.shape(), (n, m)),
            ("Dbar", d_bar.shape(), (n, m)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        Ok(Self {
            b,
            b_bar,
            c,
            c_bar,
            d,
            d_bar,
        })
    }

    /// Extract the permitted coefficients from a full model.
    pub fn from_system(sys: &MfSystem) -> Self {
        Self {
            b: sys.b().clone(),
            b_bar: sys.b_bar().clone(),
            c: sys.c().clone(),
            c_bar: sys.c_bar().clone(),
            d: sys.d().clone(),
            d_bar: sys.d_bar().clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
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

    /// `B̂ = B + B̄`.
    pub fn b_hat(&self) -> DMatrix<f64> {
        &self.b + &self.b_bar
    }

    /// `Ĉ = C + C̄`.
    pub fn c_hat(&self) -> DMatrix<f64> {
        &self.c + &self.c_bar
    }

    /// `D̂ = D + D̄`.
    pub fn d_hat(&self) -> DMatrix<f64> {
        &self.d + &self.d_bar
    }
}

/// Tuning of a data-driven run. `states = None` selects
/// [`default_state_count`] for the problem dimension at run time.
#[derive(Debug, Clone)]
pub struct RlConfig {
    /// Number of initial states N (rows of the least-squares systems).
    pub states: Option<usize>,
    /// Monte Carlo paths per state per iteration.
    pub paths: usize,
    pub grid: SimGrid,
    /// Stopping threshold on both Frobenius increments.
    pub epsilon: f64,
    /// Maximum number of successive-pair comparisons.
    pub max_iter: usize,
    pub seed: u64,
    /// Per-coordinate uniform sampling range for the initial states.
    pub state_range: (f64, f64),
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            states: None,
            paths: DEFAULT_PATHS,
            grid: SimGrid::default(),
            epsilon: RL_EPSILON,
            max_iter: RL_MAX_ITERATIONS,
            seed: 0,
            state_range: DEFAULT_STATE_RANGE,
        }
    }
}

impl RlConfig {
    /// Effective number of initial states for dimension `n`.
    pub fn state_count(&self, n: usize) -> usize {
        self.states.unwrap_or_else(|| default_state_count(n))
    }

    /// Validate against a problem dimension, returning the state count.
    pub fn validate(&self, n: usize) -> Result<usize> {
        let n_states = self.state_count(n);
        let required = n * (n + 1) / 2;
        if n_states < required {
            return Err(Error::InvalidInput(format!(
                "{n_states} initial states cannot identify the {required} \
                 free entries of a symmetric {n}x{n} matrix"
            )));
        }
        if self.paths == 0 {
            return Err(Error::InvalidInput("path count must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "stopping threshold must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("iteration cap must be at least 1".into()));
        }
        let (lo, hi) = self.state_range;
        if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
            return Err(Error::InvalidInput(format!(
                "state sampling range [{lo}, {hi}) is empty or not finite"
            )));
        }
        Ok(n_states)
    }
}

/// Everything one policy-evaluation step needs, reduced from the sampled
/// ensembles: the regressor matrices `ℐ_X` and `𝒦_x` (each N×n²) and the
/// objective vectors `𝕁₀` and `𝕁`.
///
/// Row `j` of `𝒦_x` is `x_jᵀ ⊗ x_jᵀ` (enforced on construction). At least
/// `n(n+1)/2` rows are necessary for the systems to be solvable; batches
/// with fewer rows are constructible but can never pass
/// [`check_rank_condition`].
#[derive(Debug, Clone)]
pub struct EvaluationBatch {
    states: Vec<DVector<f64>>,
    i_x: DMatrix<f64>,
    k_x: DMatrix<f64>,
    j0: DVector<f64>,
    j: DVector<f64>,
}

impl EvaluationBatch {
    pub fn new(
        states: Vec<DVector<f64>>,
        i_x: DMatrix<f64>,
        k_x: DMatrix<f64>,
        j0: DVector<f64>,
        j: DVector<f64>,
    ) -> Result<Self> {
        let n_states = states.len();
        if n_states == 0 {
            return Err(Error::InvalidInput("batch needs at least one state".into()));
        }
        let n = states[0].len();
        if states.iter().any(|x| x.len() != n) {
            return Err(Error::Dimension("all initial states must share one length".into()));
        }
        let nn = n * n;
        if i_x.shape() != (n_states, nn) || k_x.shape() != (n_states, nn) {
            return Err(Error::Dimension(format!(
                "regressors must be {n_states}x{nn}, got {}x{} and {}x{}",
                i_x.nrows(),
                i_x.ncols(),
                k_x.nrows(),
                k_x.ncols()
            )));
        }
        if j0.len() != n_states || j.len() != n_states {
            return Err(Error::Dimension(format!(
                "objective vectors must have length {n_states}"
            )));
        }
        let mut buf = vec![0.0; nn];
        for (row, x) in states.iter().enumerate() {
            kcal_vec_into(x.as_slice(), &mut buf);
            for (col, v) in buf.iter().enumerate() {
                if k_x[(row, col)] != *v {
                    return Err(Error::InvalidInput(format!(
                        "row {row} of the state regressor does not equal x⊗x for state {row}"
                    )));
                }
            }
        }
        Ok(Self {
            states,
            i_x,
            k_x,
            j0,
            j,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn i_x(&self) -> &DMatrix<f64> {
        &self.i_x
    }

    pub fn k_x(&self) -> &DMatrix<f64> {
        &self.k_x
    }

    pub fn j0(&self) -> &DVector<f64> {
        &self.j0
    }

    pub fn j(&self) -> &DVector<f64> {
        &self.j
    }
}

/// Fluctuation objective weight `Q + 2SᵀK + KᵀRK` (used inside a quadratic
/// form, so the asymmetric `2SᵀK` arrangement is equivalent to its
/// symmetrized version).
fn fluctuation_weight(w: &CostWeights, gain: &FeedbackGain) -> DMatrix<f64> {
    let k = gain.k();
    w.q() + (w.s().transpose() * k) * 2.0 + k.transpose() * w.r() * k
}

/// Mean objective weight `Q̂ + 2ŜᵀK̂ + K̂ᵀR̂K̂`.
fn mean_weight(w: &CostWeights, gain: &FeedbackGain) -> DMatrix<f64> {
    let k_hat = gain.k_hat();
    w.q_hat() + (w.s_hat().transpose() * k_hat) * 2.0 + k_hat.transpose() * w.r_hat() * k_hat
}

/// `Σ_{l<L} ⟨M X̄(s_l), X̄(s_l)⟩` over the sample-mean path (no Δs factor).
fn mean_quad_sum(m: &DMatrix<f64>, mean_path: &[DVector<f64>], steps: usize) -> f64 {
    let mut acc = 0.0;
    for mp in &mean_path[..steps] {
        acc += quad_form(m, mp.as_slice());
    }
    acc
}

/// Combine the streamed per-path quadratic average with the mean-path
/// correction: `(1/H)Σ_h Σ_l ⟨M(X_h - X̄), X_h - X̄⟩ Δs` computed through
/// the exact expansion `(1/H)Σ⟨MX, X⟩ - ⟨MX̄, X̄⟩` (the cross terms cancel
/// identically against the sample mean).
fn fluctuation_objective(
    quad_mean: f64,
    m: &DMatrix<f64>,
    mean_path: &[DVector<f64>],
    steps: usize,
    dt: f64,
) -> f64 {
    (quad_mean - mean_quad_sum(m, mean_path, steps)) * dt
}

/// Replay a stored bundle through the canonical chunked accumulation the
/// streaming engine uses, so the two give bitwise-equal averages.
fn bundle_quad_mean(bundle: &TrajectoryBundle, m: &DMatrix<f64>) -> f64 {
    let steps = bundle.grid().steps();
    let paths = bundle.path_count();
    let mut total = 0.0;
    for base in (0..paths).step_by(crate::sim::CHUNK) {
        let mut partial = 0.0;
        for h in base..(base + crate::sim::CHUNK).min(paths) {
            let mut acc = 0.0;
            for l in 0..steps {
                acc += quad_form(m, bundle.state_slice(h, l));
            }
            partial += acc;
        }
        total += partial;
    }
    total * (1.0 / paths as f64)
}

fn check_bundle_gain(bundle: &TrajectoryBundle, gain: &FeedbackGain) -> Result<()> {
    if gain.k() != bundle.gain().k() || gain.k_hat() != bundle.gain().k_hat() {
        return Err(Error::InvalidInput(
            "objectives must be evaluated with the gain the bundle was simulated under".into(),
        ));
    }
    Ok(())
}

/// Sample estimate of the fluctuation objective `𝒥₀` for one ensemble.
pub fn objective_j0(bundle: &TrajectoryBundle, gain: &FeedbackGain, w: &CostWeights) -> Result<f64> {
    if w.n() != bundle.state_dim() || w.m() != gain.k().nrows() {
        return Err(Error::Dimension(
            "weights, gain, and bundle dimensions must agree".into(),
        ));
    }
    check_bundle_gain(bundle, gain)?;
    let m0 = fluctuation_weight(w, gain);
    let quad_mean = bundle_quad_mean(bundle, &m0);
    Ok(fluctuation_objective(
        quad_mean,
        &m0,
        bundle.mean_path(),
        bundle.grid().steps(),
        bundle.grid().dt(),
    ))
}

/// Sample estimate of the total objective `𝒥 = 𝒥₀ + ∫⟨M̂X̄, X̄⟩ds`.
pub fn objective_j(bundle: &TrajectoryBundle, gain: &FeedbackGain, w: &CostWeights) -> Result<f64> {
    let j0 = objective_j0(bundle, gain, w)?;
    let m_hat = mean_weight(w, gain);
    let steps = bundle.grid().steps();
    Ok(j0 + mean_quad_sum(&m_hat, bundle.mean_path(), steps) * bundle.grid().dt())
}

/// Row of the fluctuation regressor for one state: the quadrature of
/// `𝒦((Ĉ+D̂K̂)X̄(s))` along the sample-mean path.
fn accumulate_i_x_row(
    row: &mut [f64],
    c_hat_cl: &DMatrix<f64>,
    mean_path: &[DVector<f64>],
    steps: usize,
    dt: f64,
    y: &mut DVector<f64>,
    buf: &mut [f64],
) {
    for mp in &mean_path[..steps] {
        y.gemv(1.0, c_hat_cl, mp, 0.0);
        kcal_vec_into(y.as_slice(), buf);
        for (r, v) in row.iter_mut().zip(buf.iter()) {
            *r += v;
        }
    }
    for r in row.iter_mut() {
        *r *= dt;
    }
}

/// Build an evaluation batch from stored ensembles, one per initial state,
/// all simulated under the same gain.
pub fn assemble_evaluation_batch(
    states: &[DVector<f64>],
    bundles: &[TrajectoryBundle],
    gain: &FeedbackGain,
    view: &ModelFreeView,
    w: &CostWeights,
) -> Result<EvaluationBatch> {
    if states.is_empty() || states.len() != bundles.len() {
        return Err(Error::InvalidInput(format!(
            "need one bundle per state, got {} states and {} bundles",
            states.len(),
            bundles.len()
        )));
    }
    let n = view.n();
    if w.n() != n || gain.k().ncols() != n || gain.k().nrows() != view.m() {
        return Err(Error::Dimension(
            "view, weights, and gain dimensions must agree".into(),
        ));
    }
    let n_states = states.len();
    let nn = n * n;
    let c_hat_cl = view.c_hat() + view.d_hat() * gain.k_hat();
    let m0 = fluctuation_weight(w, gain);
    let m_hat = mean_weight(w, gain);

    let mut i_x = DMatrix::zeros(n_states, nn);
    let mut k_x = DMatrix::zeros(n_states, nn);
    let mut j0 = DVector::zeros(n_states);
    let mut j = DVector::zeros(n_states);
    let mut row = vec![0.0; nn];
    let mut buf = vec![0.0; nn];
    let mut y = DVector::zeros(n);

    for (idx, (x0, bundle)) in states.iter().zip(bundles).enumerate() {
        if x0.len() != n {
            return Err(Error::Dimension(format!(
                "state {idx} has length {}, expected {n}",
                x0.len()
            )));
        }
        if bundle.x0() != x0 {
            return Err(Error::InvalidInput(format!(
                "bundle {idx} was not simulated from state {idx}"
            )));
        }
        check_bundle_gain(bundle, gain)?;
        let steps = bundle.grid().steps();
        let dt = bundle.grid().dt();

        row.iter_mut().for_each(|v| *v = 0.0);
        accumulate_i_x_row(&mut row, &c_hat_cl, bundle.mean_path(), steps, dt, &mut y, &mut buf);
        for (col, v) in row.iter().enumerate() {
            i_x[(idx, col)] = *v;
        }

        kcal_vec_into(x0.as_slice(), &mut buf);
        for (col, v) in buf.iter().enumerate() {
            k_x[(idx, col)] = *v;
        }

        let quad_mean = bundle_quad_mean(bundle, &m0);
        j0[idx] = fluctuation_objective(quad_mean, &m0, bundle.mean_path(), steps, dt);
        j[idx] = j0[idx] + mean_quad_sum(&m_hat, bundle.mean_path(), steps) * dt;
    }
    EvaluationBatch::new(states.to_vec(), i_x, k_x, j0, j)
}

/// Evaluation-batch rows plus the per-state second-moment decay verdicts,
/// from one fresh sweep of ensembles.
struct SampledEnsembles {
    batch: EvaluationBatch,
    /// `(decayed, terminal/initial ratio)` for each initial state.
    decay: Vec<(bool, f64)>,
}

fn sample_ensembles(
    sys: &MfSystem,
    view: &ModelFreeView,
    w: &CostWeights,
    gain: &FeedbackGain,
    states: &[DVector<f64>],
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<SampledEnsembles> {
    let n = sys.n();
    if view.n() != n || view.m() != sys.m() || w.n() != n || w.m() != sys.m() {
        return Err(Error::Dimension(
            "system, view, and weight dimensions must agree".into(),
        ));
    }
    if states.is_empty() {
        return Err(Error::InvalidInput("batch needs at least one state".into()));
    }
    let n_states = states.len();
    let nn = n * n;
    let m0 = fluctuation_weight(w, gain);
    let m_hat = mean_weight(w, gain);
    let c_hat_cl = view.c_hat() + view.d_hat() * gain.k_hat();
    let dt = grid.dt();
    let steps = grid.steps();

    let mut i_x = DMatrix::zeros(n_states, nn);
    let mut k_x = DMatrix::zeros(n_states, nn);
    let mut j0 = DVector::zeros(n_states);
    let mut j = DVector::zeros(n_states);
    let mut decay = Vec::with_capacity(n_states);
    let mut row = vec![0.0; nn];
    let mut buf = vec![0.0; nn];
    let mut y = DVector::zeros(n);
    for (idx, x0) in states.iter().enumerate() {
        let stream_base = ((idx as u64) + 1) << 40;
        let scan = scan_closed_loop(sys, gain, x0, grid, paths, seed, stream_base, Some(&m0))?;
        decay.push(decay_from_curve(&scan.second_moments));

        row.iter_mut().for_each(|v| *v = 0.0);
        accumulate_i_x_row(&mut row, &c_hat_cl, &scan.mean_path, steps, dt, &mut y, &mut buf);
        for (col, v) in row.iter().enumerate() {
            i_x[(idx, col)] = *v;
        }
        kcal_vec_into(x0.as_slice(), &mut buf);
        for (col, v) in buf.iter().enumerate() {
            k_x[(idx, col)] = *v;
        }
        j0[idx] = fluctuation_objective(scan.quad_mean, &m0, &scan.mean_path, steps, dt);
        j[idx] = j0[idx] + mean_quad_sum(&m_hat, &scan.mean_path, steps) * dt;
    }
    let batch = EvaluationBatch::new(states.to_vec(), i_x, k_x, j0, j)?;
    Ok(SampledEnsembles { batch, decay })
}

/// Simulate one fresh ensemble per initial state under `gain` and reduce
/// it to an evaluation batch on the fly — nothing path-sized is stored, so
/// the memory footprint is independent of the path count. Path `h` of
/// state `j` runs on RNG stream `(j+1)·2⁴⁰ + h` of `seed`. This is exactly
/// the sweep [`run_policy_iteration`] performs once per iteration.
#[allow(clippy::too_many_arguments)]
pub fn sample_evaluation_batch(
    sys: &MfSystem,
    view: &ModelFreeView,
    w: &CostWeights,
    gain: &FeedbackGain,
    states: &[DVector<f64>],
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<EvaluationBatch> {
    Ok(sample_ensembles(sys, view, w, gain, states, grid, paths, seed)?.batch)
}

/// Numerical ranks of the two half-vectorized regressor products, against
/// the `n(n+1)/2` needed for unique evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RankReport {
    pub satisfied: bool,
    pub rank_i_x: usize,
    pub rank_k_x: usize,
    pub required: usize,
}

pub fn check_rank_condition(batch: &EvaluationBatch, t: &DuplicationMatrix) -> RankReport {
    let required = t.reduced_len();
    let rank_i_x = numerical_rank(&(batch.i_x() * t.as_matrix()));
    let rank_k_x = numerical_rank(&(batch.k_x() * t.as_matrix()));
    RankReport {
        satisfied: rank_i_x == required && rank_k_x == required,
        rank_i_x,
        rank_k_x,
        required,
    }
}

/// Solve the two independent least-squares systems
/// `(ℐ_X𝒯)·vec⁺(P) = 𝕁₀` and `(𝒦_x𝒯)·vec⁺(P̂) = 𝕁` and un-vectorize.
pub fn evaluate_policy(batch: &EvaluationBatch, t: &DuplicationMatrix) -> Result<RiccatiPair> {
    let n = batch.state_dim();
    if t.dim() != n {
        return Err(Error::Dimension(format!(
            "duplication matrix is for n = {}, batch has n = {n}",
            t.dim()
        )));
    }
    let v0 = lstsq(&(batch.i_x() * t.as_matrix()), batch.j0())?;
    let p = unvec_plus(&v0, n)?;
    let v1 = lstsq(&(batch.k_x() * t.as_matrix()), batch.j())?;
    let p_hat = unvec_plus(&v1, n)?;
    RiccatiPair::new(p, p_hat)
}

/// Gain improvement from an evaluated pair, reading only the drift-free
/// coefficient view. Identical formula (and arithmetic) to the model-based
/// route's improvement step.
pub fn improve_policy(
    pair: &RiccatiPair,
    view: &ModelFreeView,
    w: &CostWeights,
) -> Result<FeedbackGain> {
    if view.n() != w.n() || view.m() != w.m() || pair.n() != view.n() {
        return Err(Error::Dimension(
            "view, weights, and pair dimensions must agree".into(),
        ));
    }
    gains_from_coeffs(
        view.b(),
        view.c(),
        view.d(),
        &view.b_hat(),
        &view.c_hat(),
        &view.d_hat(),
        w,
        pair,
    )
}

/// Run the full data-driven policy iteration.
///
/// `sys` acts purely as the simulation environment (the "unknown real
/// system"); every evaluation and improvement step reads only `view` and
/// the sampled trajectories. The starting gain must pass the sampled decay
/// check — the data-driven analogue of a stabilizer certificate. Residual
/// norms in the returned history are computed post hoc against the full
/// model, as a diagnostic only.
///
/// Fresh ensembles are simulated every iteration under the seed
/// `cfg.seed ⊕ iteration`, with one RNG stream per (state, path); initial
/// states are drawn once, uniformly per coordinate from `cfg.state_range`.
pub fn run_policy_iteration(
    sys: &MfSystem,
    view: &ModelFreeView,
    w: &CostWeights,
    gain0: &FeedbackGain,
    cfg: &RlConfig,
) -> Result<GareSolution> {
    let n = sys.n();
    let m = sys.m();
    if view.n() != n || view.m() != m {
        return Err(Error::Dimension(format!(
            "view has n = {}, m = {} but the system has n = {n}, m = {m}",
            view.n(),
            view.m()
        )));
    }
    if w.n() != n || w.m() != m {
        return Err(Error::Dimension(
            "weight dimensions do not match the system".into(),
        ));
    }
    let n_states = cfg.validate(n)?;
    check_pdc(w).require()?;

    // Initial states: one draw per run, on the sampler's own RNG stream
    // (path streams start at 1 << 40).
    let (lo, hi) = cfg.state_range;
    let mut state_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states: Vec<DVector<f64>> = (0..n_states)
        .map(|_| DVector::from_fn(n, |_, _| state_rng.random_range(lo..hi)))
        .collect();

    let t_dup = DuplicationMatrix::new(n);
    let mut warnings: Vec<String> = Vec::new();
    let mut gain = gain0.clone();
    let mut initial: Option<(RiccatiPair, FeedbackGain)> = None;
    let mut prev_pair: Option<RiccatiPair> = None;
    let mut history: Vec<IterationRecord> = Vec::new();

    for i in 0..=cfg.max_iter {
        let iter_seed = cfg.seed ^ (i as u64);
        let c_hat_cl = view.c_hat() + view.d_hat() * gain.k_hat();
        if numerical_rank(&c_hat_cl) < n {
            warnings.push(format!(
                "iteration {i}: Ĉ+D̂K̂ is numerically singular; the fluctuation \
                 regressor may lose rank"
            ));
        }

        let sampled =
            sample_ensembles(sys, view, w, &gain, &states, &cfg.grid, cfg.paths, iter_seed)?;
        if i == 0 {
            for (idx, (ok, ratio)) in sampled.decay.iter().enumerate() {
                if !ok {
                    return Err(Error::NotStabilizer(format!(
                        "starting gain fails the sampled decay check on state {idx}: \
                         terminal/initial second-moment ratio {ratio:.3e}"
                    )));
                }
            }
        }

        let batch = sampled.batch;
        let report = check_rank_condition(&batch, &t_dup);
        if !report.satisfied {
            let (system, rank) = if report.rank_i_x < report.required {
                ("fluctuation regressor", report.rank_i_x)
            } else {
                ("state regressor", report.rank_k_x)
            };
            return Err(Error::RankDeficient {
                system,
                rank,
                required: report.required,
            });
        }
        let pair = evaluate_policy(&batch, &t_dup)?;
        let new_gain = improve_policy(&pair, view, w)?;
        let (resid_p, resid_phat) = gare_residuals(sys, w, &pair)?.norms();

        match prev_pair.take() {
            None => {
                initial = Some((pair.clone(), new_gain.clone()));
            }
            Some(prev) => {
                let (delta_p, delta_phat) = pair.distance(&prev);
                history.push(IterationRecord {
                    index: i,
                    pair: pair.clone(),
                    gain: new_gain.clone(),
                    delta_p,
                    delta_phat,
                    resid_p,
                    resid_phat,
                });
                if delta_p < cfg.epsilon && delta_phat < cfg.epsilon {
                    let (initial_pair, initial_gain) = initial.expect("set on iteration 0");
                    return Ok(GareSolution {
                        pair,
                        gain: new_gain,
                        initial_pair,
                        initial_gain,
                        history,
                        warnings,
                    });
                }
            }
        }
        prev_pair = Some(pair);
        gain = new_gain;
    }

    let last = history.last().expect("max_iter >= 1 guarantees a comparison");
    Err(Error::MaxIterationsExceeded {
        limit: cfg.max_iter,
        delta_p: last.delta_p,
        delta_phat: last.delta_phat,
    })
}
