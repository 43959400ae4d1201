//! Shared helpers for the integration suites: seeded sampling of random
//! problem instances that are stabilizable by the zero gain and satisfy
//! the positive-definiteness condition on the weights.

use mflq_core::lyapunov::is_stabilizer;
use mflq_core::model::{check_pdc, CostWeights, FeedbackGain, MfSystem};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Shape and scale knobs for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceSpec {
    pub n: usize,
    pub m: usize,
    /// Scale of the state-diffusion blocks `C`, `C̄`; the control-diffusion
    /// blocks `D`, `D̄` get half of it. Zero gives a noise-free instance.
    pub noise: f64,
    /// Scale of the mean-coupling blocks `Ā`, `B̄`.
    pub coupling: f64,
}

/// Entrywise uniform draw from `[-scale, scale)`.
pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    if scale == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Symmetric positive definite with smallest eigenvalue at least `floor`.
pub fn rand_spd(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> DMatrix<f64> {
    let g = rand_matrix(rng, k, k, 1.0);
    &g * g.transpose() + DMatrix::identity(k, k) * floor
}

/// Symmetric positive semidefinite of the given scale.
pub fn rand_psd(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let g = rand_matrix(rng, k, k, scale);
    &g * g.transpose()
}

/// Draw an instance whose zero gain is mean-square stabilizing and whose
/// weights pass the positive-definiteness check. The drift is made
/// comfortably Hurwitz by a norm shift, so only degenerate draws are
/// rejected; the outcome is deterministic in `rng`.
pub fn random_instance(rng: &mut ChaCha8Rng, spec: &InstanceSpec) -> (MfSystem, CostWeights) {
    let (n, m) = (spec.n, spec.m);
    for _ in 0..200 {
        let a_raw = rand_matrix(rng, n, n, 1.0);
        let a = &a_raw - DMatrix::identity(n, n) * (a_raw.norm() + 0.75);
        let sys = MfSystem::new(
            a,
            rand_matrix(rng, n, n, spec.coupling),
            rand_matrix(rng, n, m, 1.0),
            rand_matrix(rng, n, m, spec.coupling),
            rand_matrix(rng, n, n, spec.noise),
            rand_matrix(rng, n, n, 0.5 * spec.noise),
            rand_matrix(rng, n, m, 0.5 * spec.noise),
            rand_matrix(rng, n, m, 0.25 * spec.noise),
        )
        .expect("sampled dimensions are consistent");
        let w = CostWeights::new(
            rand_spd(rng, n, 1.0),
            rand_psd(rng, n, 0.4),
            rand_matrix(rng, m, n, 0.15),
            rand_matrix(rng, m, n, 0.1),
            rand_spd(rng, m, 1.0),
            rand_psd(rng, m, 0.3),
        )
        .expect("sampled dimensions are consistent");
        if !check_pdc(&w).holds {
            continue;
        }
        match is_stabilizer(&sys, &FeedbackGain::zero(m, n)) {
            Ok(check) if check.is_stabilizer => return (sys, w),
            _ => continue,
        }
    }
    panic!("no admissible instance in 200 draws — loosen the sampler scales");
}
