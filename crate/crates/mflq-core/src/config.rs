//! Problem definition files.
//!
//! A problem is one TOML document: dimensions, the eight system matrices
//! and six weight matrices as nested row-major arrays, and optional
//! `[gain]`, `[grid]`, and `[rl]` blocks. Matrix keys are `A`, `Abar`,
//! `B`, `Bbar`, `C`, `Cbar`, `D`, `Dbar`, `Q`, `Qbar`, `S`, `Sbar`, `R`,
//! `Rbar`; the gain block holds `K` and `Khat`.
//!
//! Loading validates dimensions, symmetrizes the symmetric weights (with
//! a warning when the input was measurably asymmetric), and evaluates the
//! definiteness condition as a warning — solvers re-check it as a hard
//! precondition. [`write_config`] is the exact inverse of
//! [`parse_config`]: a written config loads back to the same problem.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{relative_asymmetry, SYM_TOL};
use crate::model::{check_pdc, CostWeights, FeedbackGain, MfSystem};
use crate::rl::RlConfig;
use crate::sim::SimGrid;

/// A fully validated problem: model, weights, optional starting gain, and
/// run settings.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub system: MfSystem,
    pub weights: CostWeights,
    pub gain: Option<FeedbackGain>,
    pub grid: SimGrid,
    pub rl: RlSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// The `[rl]` block: data-driven tuning that is independent of the grid
/// and seed (those are shared with the rest of the run).
#[derive(Debug, Clone, PartialEq)]
pub struct RlSettings {
    pub states: Option<usize>,
    pub paths: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub state_range: (f64, f64),
}

impl Default for RlSettings {
    fn default() -> Self {
        let d = RlConfig::default();
        Self {
            states: d.states,
            paths: d.paths,
            epsilon: d.epsilon,
            max_iter: d.max_iter,
            state_range: d.state_range,
        }
    }
}

impl ProblemConfig {
    /// Assemble the data-driven run configuration from the shared grid and
    /// seed plus the `[rl]` block.
    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            states: self.rl.states,
            paths: self.rl.paths,
            grid: self.grid,
            epsilon: self.rl.epsilon,
            max_iter: self.rl.max_iter,
            seed: self.seed,
            state_range: self.rl.state_range,
        }
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }
}

/// On-disk shape. Tables must come after the top-level keys, hence the
/// field order.
#[derive(Serialize, Deserialize)]
struct ConfigFile {
    n: usize,
    m: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<String>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "Abar")]
    a_bar: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Bbar")]
    b_bar: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "Cbar")]
    c_bar: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(rename = "Dbar")]
    d_bar: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "Qbar")]
    q_bar: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    #[serde(rename = "Sbar")]
    s_bar: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "Rbar")]
    r_bar: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gain: Option<GainBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rl: Option<RlBlock>,
}

#[derive(Serialize, Deserialize)]
struct GainBlock {
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    #[serde(rename = "Khat")]
    k_hat: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GridBlock {
    dt: f64,
    steps: usize,
}

#[derive(Serialize, Deserialize, Default)]
struct RlBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_range: Option<(f64, f64)>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>], want_r: usize, want_c: usize) -> Result<DMatrix<f64>> {
    if rows.len() != want_r || rows.iter().any(|r| r.len() != want_c) {
        return Err(Error::Dimension(format!(
            "{name} must be {want_r}x{want_c} (row-major nested arrays)"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} contains a non-finite entry")));
    }
    Ok(DMatrix::from_row_slice(want_r, want_c, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Parse and validate a config document. Returns the problem plus
/// non-fatal diagnostics (weight symmetrization, definiteness failure).
pub fn parse_config(text: &str) -> Result<(ProblemConfig, Vec<String>)> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let (n, m) = (file.n, file.m);
    if n == 0 || m == 0 {
        return Err(Error::Dimension(format!(
            "dimensions must be positive, got n = {n}, m = {m}"
        )));
    }
    let mut warnings = Vec::new();

    let system = MfSystem::new(
        rows_to_matrix("A", &file.a, n, n)?,
        rows_to_matrix("Abar", &file.a_bar, n, n)?,
        rows_to_matrix("B", &file.b, n, m)?,
        rows_to_matrix("Bbar", &file.b_bar, n, m)?,
        rows_to_matrix("C", &file.c, n, n)?,
        rows_to_matrix("Cbar", &file.c_bar, n, n)?,
        rows_to_matrix("D", &file.d, n, m)?,
        rows_to_matrix("Dbar", &file.d_bar, n, m)?,
    )?;

    let q = rows_to_matrix("Q", &file.q, n, n)?;
    let q_bar = rows_to_matrix("Qbar", &file.q_bar, n, n)?;
    let s = rows_to_matrix("S", &file.s, m, n)?;
    let s_bar = rows_to_matrix("Sbar", &file.s_bar, m, n)?;
    let r = rows_to_matrix("R", &file.r, m, m)?;
    let r_bar = rows_to_matrix("Rbar", &file.r_bar, m, m)?;
    for (name, mat) in [("Q", &q), ("Qbar", &q_bar), ("R", &r), ("Rbar", &r_bar)] {
        let asym = relative_asymmetry(mat);
        if asym > SYM_TOL {
            warnings.push(format!(
                "{name} is asymmetric (relative asymmetry {asym:.3e}); using its symmetric part"
            ));
        }
    }
    let weights = CostWeights::new(q, q_bar, s, s_bar, r, r_bar)?;
    let pdc = check_pdc(&weights);
    if !pdc.holds {
        warnings.push(format!(
            "definiteness condition fails (min eig of the R block: {:.3e}{}); solvers will reject this problem",
            pdc.min_eig_r,
            match pdc.min_eig_schur {
                Some(e) => format!(", of the reduced Q block: {e:.3e}"),
                None => String::new(),
            }
        ));
    }

    let gain = match &file.gain {
        Some(g) => Some(FeedbackGain::new(
            rows_to_matrix("K", &g.k, m, n)?,
            rows_to_matrix("Khat", &g.k_hat, m, n)?,
        )?),
        None => None,
    };
    let grid = match &file.grid {
        Some(g) => SimGrid::new(g.dt, g.steps)?,
        None => SimGrid::default(),
    };
    let defaults = RlSettings::default();
    let rl_block = file.rl.unwrap_or_default();
    let rl = RlSettings {
        states: rl_block.states,
        paths: rl_block.paths.unwrap_or(defaults.paths),
        epsilon: rl_block.epsilon.unwrap_or(defaults.epsilon),
        max_iter: rl_block.max_iter.unwrap_or(defaults.max_iter),
        state_range: rl_block.state_range.unwrap_or(defaults.state_range),
    };

    let config = ProblemConfig {
        system,
        weights,
        gain,
        grid,
        rl,
        seed: file.seed,
        out_dir: PathBuf::from(file.out.unwrap_or_else(|| ".".into())),
    };
    Ok((config, warnings))
}

/// Read and parse a config file.
pub fn load_config(path: &Path) -> Result<(ProblemConfig, Vec<String>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Render a problem back to the on-disk format. Inverse of
/// [`parse_config`] up to symmetrization (which loading already applied).
pub fn write_config(cfg: &ProblemConfig) -> String {
    let sys = &cfg.system;
    let w = &cfg.weights;
    let file = ConfigFile {
        n: cfg.n(),
        m: cfg.m(),
        seed: cfg.seed,
        out: Some(cfg.out_dir.display().to_string()),
        a: matrix_to_rows(sys.a()),
        a_bar: matrix_to_rows(sys.a_bar()),
        b: matrix_to_rows(sys.b()),
        b_bar: matrix_to_rows(sys.b_bar()),
        c: matrix_to_rows(sys.c()),
        c_bar: matrix_to_rows(sys.c_bar()),
        d: matrix_to_rows(sys.d()),
        d_bar: matrix_to_rows(sys.d_bar()),
        q: matrix_to_rows(w.q()),
        q_bar: matrix_to_rows(w.q_bar()),
        s: matrix_to_rows(w.s()),
        s_bar: matrix_to_rows(w.s_bar()),
        r: matrix_to_rows(w.r()),
        r_bar: matrix_to_rows(w.r_bar()),
        gain: cfg.gain.as_ref().map(|g| GainBlock {
            k: matrix_to_rows(g.k()),
            k_hat: matrix_to_rows(g.k_hat()),
        }),
        grid: Some(GridBlock {
            dt: cfg.grid.dt(),
            steps: cfg.grid.steps(),
        }),
        rl: Some(RlBlock {
            states: cfg.rl.states,
            paths: Some(cfg.rl.paths),
            epsilon: Some(cfg.rl.epsilon),
            max_iter: Some(cfg.rl.max_iter),
            state_range: Some(cfg.rl.state_range),
        }),
    };
    toml::to_string(&file).expect("config serialization cannot fail")
}

/// Write a problem to disk in the on-disk format.
pub fn save_config(cfg: &ProblemConfig, path: &Path) -> Result<()> {
    fs::write(path, write_config(cfg))?;
    Ok(())
}
