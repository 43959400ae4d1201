//! Seeded Euler–Maruyama simulation of the closed-loop mean-field SDE,
//! sample-mean statistics, cost estimation, and the fundamental-solution
//! Monte Carlo representation of the fluctuation matrix `P`.
//!
//! Every path follows the explicit scheme
//!
//! ```text
//! X(s+Δs) = X + [(A+BK)(X-X̄) + (Â+B̂K̂)X̄]Δs + [(C+DK)(X-X̄) + (Ĉ+D̂K̂)X̄]ΔW
//! ```
//!
//! where the conditional mean `X̄` is propagated by the deterministic Euler
//! recursion `X̄(s+Δs) = X̄ + (Â+B̂K̂)X̄Δs` shared by all paths, and
//! `ΔW = Z√Δs` with `Z` standard normal. Each path draws from its own
//! counter-selected ChaCha stream, and cross-path reductions run over fixed
//! 1024-path chunks combined in ascending order, so results are
//! bit-identical for a given seed at any worker count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{bilinear_form, quad_form};
use crate::lyapunov::{closed_loop, ClosedLoopMatrices};
use crate::model::{CostWeights, FeedbackGain, MfSystem};

/// Default step size.
pub const DEFAULT_DT: f64 = 0.01;
/// Default step count (horizon T = 20 with the default step size).
pub const DEFAULT_STEPS: usize = 2000;
/// Default Monte Carlo path count.
pub const DEFAULT_PATHS: usize = 100_000;
/// A closed loop counts as decaying when the terminal sample second moment
/// falls below this fraction of the initial one.
pub const DECAY_RATIO: f64 = 0.05;
/// Adaptive horizon rule: extend until the mean-ODE norm falls below this
/// fraction of `|x0|`.
pub const HORIZON_DECAY_TOL: f64 = 1e-6;

/// Fixed reduction chunk: paths are simulated and summed in blocks of this
/// many, and the blocks are combined in ascending order. Part of the
/// reproducibility contract — do not change without versioning outputs.
pub(crate) const CHUNK: usize = 1024;

/// Uniform time grid on `[0, T]` with `T = dt * steps`. The start time is
/// fixed at zero: with a deterministic initial state the conditional
/// expectations in the problem reduce to plain means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGrid {
    dt: f64,
    steps: usize,
}

impl SimGrid {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "step size must be positive and finite, got {dt}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("step count must be at least 1".into()));
        }
        Ok(Self { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of Euler steps L; the grid has L+1 points.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

impl Default for SimGrid {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            steps: DEFAULT_STEPS,
        }
    }
}

/// A seeded ensemble of closed-loop sample paths together with the
/// cross-path sample mean at every grid point.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    grid: SimGrid,
    x0: DVector<f64>,
    gain: FeedbackGain,
    seed: u64,
    paths: usize,
    n: usize,
    /// Path-major storage: entry `(h, l, i)` lives at `(h*(L+1) + l)*n + i`.
    states: Vec<f64>,
    mean_path: Vec<DVector<f64>>,
    second_moments: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn gain(&self) -> &FeedbackGain {
        &self.gain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_count(&self) -> usize {
        self.paths
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// State of path `h` at grid point `l`, as a borrowed coordinate slice.
    pub fn state_slice(&self, h: usize, l: usize) -> &[f64] {
        let off = (h * (self.grid.steps + 1) + l) * self.n;
        &self.states[off..off + self.n]
    }

    /// State of path `h` at grid point `l`.
    pub fn state(&self, h: usize, l: usize) -> DVector<f64> {
        DVector::from_column_slice(self.state_slice(h, l))
    }

    /// Cross-path sample mean at every grid point (fixed summation order).
    pub fn mean_path(&self) -> &[DVector<f64>] {
        &self.mean_path
    }

    /// Sample mean of `|X(s_l)|²` at every grid point.
    pub fn second_moments(&self) -> &[f64] {
        &self.second_moments
    }
}

/// Sample paths of the fundamental matrix solution of the closed-loop
/// homogeneous fluctuation SDE, with `Φ(0) = I`.
#[derive(Debug, Clone)]
pub struct FundamentalBundle {
    grid: SimGrid,
    seed: u64,
    paths: usize,
    n: usize,
    /// Path-major storage of column-major n×n matrices.
    mats: Vec<f64>,
}

impl FundamentalBundle {
    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_count(&self) -> usize {
        self.paths
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Fundamental matrix of path `h` at grid point `l`.
    pub fn matrix(&self, h: usize, l: usize) -> DMatrix<f64> {
        let nn = self.n * self.n;
        let off = (h * (self.grid.steps + 1) + l) * nn;
        DMatrix::from_column_slice(self.n, self.n, &self.mats[off..off + nn])
    }
}

/// Streaming single-pass statistics of a simulated ensemble: everything the
/// trajectory-driven solver needs, without materializing the paths.
///
/// `quad_mean` is the per-path average of `Σ_{l<L} ⟨M X(s_l), X(s_l)⟩` for
/// the requested weighting matrix `M` (no `Δs` factor applied), accumulated
/// in the same canonical chunk order as a stored bundle would produce.
#[derive(Debug, Clone)]
pub(crate) struct PathScan {
    pub mean_path: Vec<DVector<f64>>,
    pub second_moments: Vec<f64>,
    pub quad_mean: f64,
}

/// Precomputed deterministic ingredients shared by all paths: the Euler
/// mean recursion and its per-step drift/diffusion contributions.
struct MeanControls {
    /// `X̄(s_l)`, length L+1, flattened.
    xbar: Vec<f64>,
    /// `(Â+B̂K̂)X̄(s_l)·Δs`, length L, flattened.
    drift: Vec<f64>,
    /// `(Ĉ+D̂K̂)X̄(s_l)`, length L, flattened.
    diff: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn mean_controls(cl: &ClosedLoopMatrices, x0: &DVector<f64>, grid: &SimGrid) -> MeanControls {
    let n = x0.len();
    let steps = grid.steps;
    let dt = grid.dt;
    let a_hat = row_major(&cl.a_hat_cl);
    let c_hat = row_major(&cl.c_hat_cl);
    let mut xbar = vec![0.0; (steps + 1) * n];
    let mut drift = vec![0.0; steps * n];
    let mut diff = vec![0.0; steps * n];
    xbar[..n].copy_from_slice(x0.as_slice());
    for l in 0..steps {
        let (cur, rest) = xbar[l * n..].split_at_mut(n);
        for i in 0..n {
            let mut da = 0.0;
            let mut dc = 0.0;
            for k in 0..n {
                da += a_hat[i * n + k] * cur[k];
                dc += c_hat[i * n + k] * cur[k];
            }
            drift[l * n + i] = da * dt;
            diff[l * n + i] = dc;
            rest[i] = cur[i] + da * dt;
        }
    }
    MeanControls { xbar, drift, diff }
}

/// Per-chunk accumulators, combined across chunks in ascending order.
struct ChunkScan {
    mean_sum: Vec<f64>,
    sq_sum: Vec<f64>,
    quad_sum: f64,
    states: Option<Vec<f64>>,
    /// Lowest diverging path in this chunk, with its first non-finite step.
    bad: Option<(usize, usize)>,
}

struct EngineOutput {
    mean_path: Vec<DVector<f64>>,
    second_moments: Vec<f64>,
    quad_mean: f64,
    states: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn scan_chunk(
    base: usize,
    count: usize,
    n: usize,
    grid: &SimGrid,
    acl: &[f64],
    ccl: &[f64],
    mc: &MeanControls,
    seed: u64,
    stream_base: u64,
    quad: Option<&DMatrix<f64>>,
    store: bool,
) -> ChunkScan {
    let steps = grid.steps;
    let dt = grid.dt;
    let sqrt_dt = dt.sqrt();
    let mut out = ChunkScan {
        mean_sum: vec![0.0; (steps + 1) * n],
        sq_sum: vec![0.0; steps + 1],
        quad_sum: 0.0,
        states: store.then(|| Vec::with_capacity(count * (steps + 1) * n)),
        bad: None,
    };
    let mut x = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut xn = vec![0.0; n];

    'paths: for local in 0..count {
        let h = base + local;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_base + h as u64);
        x.copy_from_slice(&mc.xbar[..n]);
        let mut path_quad = 0.0;

        for l in 0..=steps {
            let row = &mut out.mean_sum[l * n..(l + 1) * n];
            let mut sq = 0.0;
            for i in 0..n {
                row[i] += x[i];
                sq += x[i] * x[i];
            }
            out.sq_sum[l] += sq;
            if let Some(buf) = out.states.as_mut() {
                buf.extend_from_slice(&x);
            }
            if l == steps {
                break;
            }
            if let Some(m) = quad {
                path_quad += quad_form(m, &x);
            }

            let xb = &mc.xbar[l * n..(l + 1) * n];
            for i in 0..n {
                f[i] = x[i] - xb[i];
            }
            let z: f64 = rng.sample(StandardNormal);
            let dw = z * sqrt_dt;
            let dr = &mc.drift[l * n..(l + 1) * n];
            let di = &mc.diff[l * n..(l + 1) * n];
            let mut finite = true;
            for i in 0..n {
                let mut fa = 0.0;
                let mut fc = 0.0;
                for k in 0..n {
                    fa += acl[i * n + k] * f[k];
                    fc += ccl[i * n + k] * f[k];
                }
                let v = x[i] + fa * dt + dr[i] + (fc + di[i]) * dw;
                finite &= v.is_finite();
                xn[i] = v;
            }
            if !finite {
                out.bad = Some((h, l + 1));
                break 'paths;
            }
            std::mem::swap(&mut x, &mut xn);
        }
        out.quad_sum += path_quad;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_engine(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
    stream_base: u64,
    quad: Option<&DMatrix<f64>>,
    store: bool,
) -> Result<EngineOutput> {
    let n = sys.n();
    if x0.len() != n {
        return Err(Error::Dimension(format!(
            "initial state has length {} but the system has n = {n}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state must be finite".into()));
    }
    if paths == 0 {
        return Err(Error::InvalidInput("path count must be at least 1".into()));
    }
    if let Some(m) = quad {
        if m.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "quadratic weight is {}x{} but the system has n = {n}",
                m.nrows(),
                m.ncols()
            )));
        }
    }

    let cl = closed_loop(sys, gain)?;
    let acl = row_major(&cl.a_cl);
    let ccl = row_major(&cl.c_cl);
    let mc = mean_controls(&cl, x0, grid);

    let n_chunks = paths.div_ceil(CHUNK);
    let chunks: Vec<ChunkScan> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let base = c * CHUNK;
            let count = CHUNK.min(paths - base);
            scan_chunk(
                base,
                count,
                n,
                grid,
                &acl,
                &ccl,
                &mc,
                seed,
                stream_base,
                quad,
                store,
            )
        })
        .collect();

    for chunk in &chunks {
        if let Some((path, step)) = chunk.bad {
            return Err(Error::Diverged { path, step });
        }
    }

    let steps = grid.steps;
    let mut mean_sum = vec![0.0; (steps + 1) * n];
    let mut sq_sum = vec![0.0; steps + 1];
    let mut quad_total = 0.0;
    let mut states = store.then(|| Vec::with_capacity(paths * (steps + 1) * n));
    for chunk in chunks {
        for (acc, v) in mean_sum.iter_mut().zip(&chunk.mean_sum) {
            *acc += v;
        }
        for (acc, v) in sq_sum.iter_mut().zip(&chunk.sq_sum) {
            *acc += v;
        }
        quad_total += chunk.quad_sum;
        if let (Some(all), Some(part)) = (states.as_mut(), chunk.states) {
            all.extend_from_slice(&part);
        }
    }

    let inv_h = 1.0 / paths as f64;
    let mean_path = (0..=steps)
        .map(|l| DVector::from_iterator(n, mean_sum[l * n..(l + 1) * n].iter().map(|v| v * inv_h)))
        .collect();
    let second_moments = sq_sum.iter().map(|v| v * inv_h).collect();
    Ok(EngineOutput {
        mean_path,
        second_moments,
        quad_mean: quad_total * inv_h,
        states,
    })
}

/// Simulate `paths` closed-loop sample paths from the deterministic initial
/// state `x0` and return the full ensemble. Bit-reproducible for a fixed
/// `(seed, paths, grid)` at any worker count.
pub fn simulate_closed_loop(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    let out = run_engine(sys, gain, x0, grid, paths, seed, 0, None, true)?;
    Ok(TrajectoryBundle {
        grid: *grid,
        x0: x0.clone(),
        gain: gain.clone(),
        seed,
        paths,
        n: sys.n(),
        states: out.states.expect("store requested"),
        mean_path: out.mean_path,
        second_moments: out.second_moments,
    })
}

/// Single-pass ensemble statistics without storing the paths; statistics
/// are bitwise identical to those of a stored bundle with the same
/// arguments. `stream_base` offsets the per-path RNG streams so disjoint
/// ensembles under one seed stay independent.
pub(crate) fn scan_closed_loop(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
    stream_base: u64,
    quad: Option<&DMatrix<f64>>,
) -> Result<PathScan> {
    let out = run_engine(sys, gain, x0, grid, paths, seed, stream_base, quad, false)?;
    Ok(PathScan {
        mean_path: out.mean_path,
        second_moments: out.second_moments,
        quad_mean: out.quad_mean,
    })
}

/// Exact conditional-mean trajectory `E[X(s_l)] = exp((Â+B̂K̂)s_l)·x0`,
/// propagated by repeated application of the one-step matrix exponential.
pub fn mean_ode(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    grid: &SimGrid,
) -> Result<Vec<DVector<f64>>> {
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!(
            "initial state has length {} but the system has n = {}",
            x0.len(),
            sys.n()
        )));
    }
    let cl = closed_loop(sys, gain)?;
    let e = (&cl.a_hat_cl * grid.dt).exp();
    let mut path = Vec::with_capacity(grid.steps + 1);
    path.push(x0.clone());
    for l in 0..grid.steps {
        let next = &e * &path[l];
        path.push(next);
    }
    Ok(path)
}

/// Left-endpoint Riemann estimate of the infinite-horizon cost truncated at
/// the bundle horizon, under the feedback `u = K(X-X̄) + K̂X̄`, with all
/// expectations replaced by cross-path sample means. Deterministic given
/// the bundle.
pub fn estimate_cost(bundle: &TrajectoryBundle, w: &CostWeights, gain: &FeedbackGain) -> Result<f64> {
    let n = bundle.n;
    let m = gain.k().nrows();
    if w.n() != n || gain.k().ncols() != n {
        return Err(Error::Dimension(format!(
            "bundle has n = {n} but weights have n = {} and gain has n = {}",
            w.n(),
            gain.k().ncols()
        )));
    }
    if gain.k() != bundle.gain.k() || gain.k_hat() != bundle.gain.k_hat() {
        return Err(Error::InvalidInput(
            "cost must be estimated with the gain the bundle was simulated under".into(),
        ));
    }
    let steps = bundle.grid.steps;
    let paths = bundle.paths;

    // Per-step mean-feedback terms: u = K x - (K mp - K̂ mp) with mp the
    // sample-mean path, so precompute (K̂ - K)·mp once per step.
    let mut shift = Vec::with_capacity(steps);
    for mp in &bundle.mean_path[..steps] {
        shift.push(gain.k_hat() * mp - gain.k() * mp);
    }

    // First pass over paths: sample-path terms and the control mean.
    let mut path_term = 0.0;
    let mut u_sum = vec![0.0; steps * m];
    let mut u = vec![0.0; m];
    for h in 0..paths {
        let mut acc = 0.0;
        for l in 0..steps {
            let x = bundle.state_slice(h, l);
            let sh = &shift[l];
            for i in 0..m {
                let mut v = sh[i];
                for k in 0..n {
                    v += gain.k()[(i, k)] * x[k];
                }
                u[i] = v;
                u_sum[l * m + i] += v;
            }
            acc += quad_form(w.q(), x) + quad_form(w.r(), &u) + 2.0 * bilinear_form(w.s(), x, &u);
        }
        path_term += acc;
    }
    path_term /= paths as f64;

    // Deterministic mean terms from the sample-mean state and control.
    let inv_h = 1.0 / paths as f64;
    let mut mean_term = 0.0;
    for l in 0..steps {
        let mp = bundle.mean_path[l].as_slice();
        let ubar: Vec<f64> = u_sum[l * m..(l + 1) * m].iter().map(|v| v * inv_h).collect();
        mean_term += quad_form(w.q_bar(), mp)
            + quad_form(w.r_bar(), &ubar)
            + 2.0 * bilinear_form(w.s_bar(), mp, &ubar);
    }

    Ok((path_term + mean_term) * bundle.grid.dt)
}

/// Monte Carlo estimate of the fluctuation matrix together with the
/// entrywise standard error of the estimator.
#[derive(Debug, Clone)]
pub struct FundamentalEstimate {
    /// Symmetrized sample-mean estimate of `P`.
    pub p: DMatrix<f64>,
    /// Entrywise standard error (zero when only one path was drawn).
    pub stderr: DMatrix<f64>,
    pub paths: usize,
}

fn fundamental_step(
    phi: &mut [f64],
    next: &mut [f64],
    acl: &[f64],
    ccl: &[f64],
    n: usize,
    dt: f64,
    dw: f64,
) -> bool {
    // Φ_{l+1} = Φ_l + (A_cl·Δs + C_cl·ΔW)·Φ_l, column-major storage.
    let mut finite = true;
    for j in 0..n {
        let col = &phi[j * n..(j + 1) * n];
        for i in 0..n {
            let mut fa = 0.0;
            let mut fc = 0.0;
            for k in 0..n {
                fa += acl[i * n + k] * col[k];
                fc += ccl[i * n + k] * col[k];
            }
            let v = col[i] + fa * dt + fc * dw;
            finite &= v.is_finite();
            next[j * n + i] = v;
        }
    }
    finite
}

/// Estimate `P = E ∫ Φᵀ(KᵀRK + SᵀK + KᵀS + Q)Φ ds` by simulating the
/// fundamental solution `dΦ = (A+BK)Φ ds + (C+DK)Φ dW`, `Φ(0) = I`.
pub fn estimate_p_fundamental(
    sys: &MfSystem,
    w: &CostWeights,
    gain: &FeedbackGain,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<FundamentalEstimate> {
    if paths == 0 {
        return Err(Error::InvalidInput("path count must be at least 1".into()));
    }
    let n = sys.n();
    if w.n() != n || gain.k().ncols() != n {
        return Err(Error::Dimension(
            "system, weights, and gain dimensions must agree".into(),
        ));
    }
    let cl = closed_loop(sys, gain)?;
    let acl = row_major(&cl.a_cl);
    let ccl = row_major(&cl.c_cl);
    let k = gain.k();
    let lambda = k.transpose() * w.r() * k + w.s().transpose() * k + k.transpose() * w.s() + w.q();

    let steps = grid.steps;
    let dt = grid.dt;
    let sqrt_dt = dt.sqrt();
    let nn = n * n;

    struct FundChunk {
        sum: Vec<f64>,
        sum_sq: Vec<f64>,
        bad: Option<(usize, usize)>,
    }

    let n_chunks = paths.div_ceil(CHUNK);
    let chunks: Vec<FundChunk> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let base = c * CHUNK;
            let count = CHUNK.min(paths - base);
            let mut out = FundChunk {
                sum: vec![0.0; nn],
                sum_sq: vec![0.0; nn],
                bad: None,
            };
            let mut phi = vec![0.0; nn];
            let mut next = vec![0.0; nn];
            let mut integral = vec![0.0; nn];
            let mut work = DVector::zeros(n);
            'paths: for local in 0..count {
                let h = base + local;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(h as u64);
                phi.fill(0.0);
                for i in 0..n {
                    phi[i * n + i] = 1.0;
                }
                integral.fill(0.0);
                for l in 0..steps {
                    // integral += Φᵀ Λ Φ, exploiting (ΦᵀΛΦ)_{ij} = ⟨Λφ_j, φ_i⟩.
                    for j in 0..n {
                        let col_j = &phi[j * n..(j + 1) * n];
                        work.as_mut_slice().iter_mut().enumerate().for_each(|(i, t)| {
                            let mut s = 0.0;
                            for kk in 0..n {
                                s += lambda[(i, kk)] * col_j[kk];
                            }
                            *t = s;
                        });
                        for i in 0..n {
                            let col_i = &phi[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for kk in 0..n {
                                s += work[kk] * col_i[kk];
                            }
                            integral[j * n + i] += s;
                        }
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    if !fundamental_step(&mut phi, &mut next, &acl, &ccl, n, dt, z * sqrt_dt) {
                        out.bad = Some((h, l + 1));
                        break 'paths;
                    }
                    std::mem::swap(&mut phi, &mut next);
                }
                for (idx, v) in integral.iter().enumerate() {
                    let scaled = v * dt;
                    out.sum[idx] += scaled;
                    out.sum_sq[idx] += scaled * scaled;
                }
            }
            out
        })
        .collect();

    for chunk in &chunks {
        if let Some((path, step)) = chunk.bad {
            return Err(Error::Diverged { path, step });
        }
    }

    let mut sum = vec![0.0; nn];
    let mut sum_sq = vec![0.0; nn];
    for chunk in chunks {
        for (acc, v) in sum.iter_mut().zip(&chunk.sum) {
            *acc += v;
        }
        for (acc, v) in sum_sq.iter_mut().zip(&chunk.sum_sq) {
            *acc += v;
        }
    }

    let h = paths as f64;
    let mean = DMatrix::from_column_slice(n, n, &sum) / h;
    let stderr = if paths > 1 {
        DMatrix::from_fn(n, n, |i, j| {
            let idx = j * n + i;
            let var = (sum_sq[idx] - sum[idx] * sum[idx] / h) / (h - 1.0);
            (var.max(0.0) / h).sqrt()
        })
    } else {
        DMatrix::zeros(n, n)
    };
    Ok(FundamentalEstimate {
        p: crate::linalg::symmetrize(&mean),
        stderr: crate::linalg::symmetrize(&stderr),
        paths,
    })
}

/// Simulate and store fundamental-solution sample paths.
pub fn simulate_fundamental(
    sys: &MfSystem,
    gain: &FeedbackGain,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<FundamentalBundle> {
    if paths == 0 {
        return Err(Error::InvalidInput("path count must be at least 1".into()));
    }
    let n = sys.n();
    let cl = closed_loop(sys, gain)?;
    let acl = row_major(&cl.a_cl);
    let ccl = row_major(&cl.c_cl);
    let steps = grid.steps;
    let dt = grid.dt;
    let sqrt_dt = dt.sqrt();
    let nn = n * n;

    let mut mats = vec![0.0; paths * (steps + 1) * nn];
    let mut next = vec![0.0; nn];
    let mut bad = None;
    'paths: for h in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(h as u64);
        let base = h * (steps + 1) * nn;
        for i in 0..n {
            mats[base + i * n + i] = 1.0;
        }
        for l in 0..steps {
            let (head, tail) = mats.split_at_mut(base + (l + 1) * nn);
            let phi = &mut head[base + l * nn..];
            let z: f64 = rng.sample(StandardNormal);
            if !fundamental_step(phi, &mut next, &acl, &ccl, n, dt, z * sqrt_dt) {
                bad = Some((h, l + 1));
                break 'paths;
            }
            tail[..nn].copy_from_slice(&next);
        }
    }
    if let Some((path, step)) = bad {
        return Err(Error::Diverged { path, step });
    }
    Ok(FundamentalBundle {
        grid: *grid,
        seed,
        paths,
        n,
        mats,
    })
}

/// Whether the terminal sample second moment has fallen below
/// `DECAY_RATIO` times the initial one, plus the full curve.
#[derive(Debug, Clone)]
pub struct DecayReport {
    pub decayed: bool,
    /// Terminal-to-initial second-moment ratio.
    pub ratio: f64,
    /// Sample mean of `|X(s_l)|²` at every grid point.
    pub curve: Vec<f64>,
}

pub(crate) fn decay_from_curve(curve: &[f64]) -> (bool, f64) {
    let first = curve[0];
    let last = *curve.last().expect("curve has at least one point");
    if first == 0.0 {
        if last == 0.0 {
            (true, 0.0)
        } else {
            (false, f64::INFINITY)
        }
    } else {
        (last <= DECAY_RATIO * first, last / first)
    }
}

/// Finite-horizon restatement of mean-square stabilization: check that the
/// ensemble's second moment has decayed across the bundle horizon.
pub fn decay_check(bundle: &TrajectoryBundle) -> DecayReport {
    let (decayed, ratio) = decay_from_curve(&bundle.second_moments);
    DecayReport {
        decayed,
        ratio,
        curve: bundle.second_moments.clone(),
    }
}

/// Streaming ensemble statistics: the cross-path sample-mean trajectory
/// and the second-moment decay report.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub mean_path: Vec<DVector<f64>>,
    pub decay: DecayReport,
}

/// Compute [`EnsembleStats`] without materializing any path: memory stays
/// constant in the path count. Paths are drawn from the same RNG streams
/// as [`simulate_closed_loop`], so path `h` here is sample-identical to
/// path `h` of a stored bundle with the same arguments.
pub fn ensemble_statistics(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    grid: &SimGrid,
    paths: usize,
    seed: u64,
) -> Result<EnsembleStats> {
    let scan = scan_closed_loop(sys, gain, x0, grid, paths, seed, 0, None)?;
    let (decayed, ratio) = decay_from_curve(&scan.second_moments);
    Ok(EnsembleStats {
        mean_path: scan.mean_path,
        decay: DecayReport {
            decayed,
            ratio,
            curve: scan.second_moments,
        },
    })
}

/// Extend the horizon until the exact mean trajectory has collapsed to
/// `HORIZON_DECAY_TOL·|x0|`, in steps of size `dt`, failing beyond
/// `max_steps`. Useful when the default horizon is too short for a slow
/// closed loop.
pub fn adaptive_grid(
    sys: &MfSystem,
    gain: &FeedbackGain,
    x0: &DVector<f64>,
    dt: f64,
    max_steps: usize,
) -> Result<SimGrid> {
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!(
            "initial state has length {} but the system has n = {}",
            x0.len(),
            sys.n()
        )));
    }
    SimGrid::new(dt, 1)?;
    let cl = closed_loop(sys, gain)?;
    let e = (&cl.a_hat_cl * dt).exp();
    let threshold = HORIZON_DECAY_TOL * x0.norm();
    let mut x = x0.clone();
    let mut steps = 0usize;
    while x.norm() > threshold {
        if steps >= max_steps {
            return Err(Error::NotSolvable(format!(
                "mean trajectory did not fall below {threshold:.3e} within {max_steps} steps; \
                 the gain may not stabilize the mean dynamics"
            )));
        }
        x = &e * &x;
        steps += 1;
    }
    SimGrid::new(dt, steps.max(1))
}
