//! Result persistence: solution files, iteration logs, and trajectory
//! exports.
//!
//! Every floating-point value is serialized with 17 significant digits,
//! enough to reconstruct the exact binary value on load, so identical runs
//! produce byte-identical files and saved results round-trip losslessly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gare::{GareSolution, IterationRecord};
use crate::model::{FeedbackGain, RiccatiPair};
use crate::sim::{SimGrid, TrajectoryBundle};

/// 17-significant-digit scientific form: lossless for `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_matrix_json(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let cells: Vec<String> = (0..m.ncols()).map(|j| fmt_float(m[(i, j)])).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Render a converged solution as a JSON document: the Riccati pair, the
/// improved gains, the final residual norms, the comparison count, and any
/// warnings collected along the run.
pub fn solution_json(sol: &GareSolution) -> String {
    let last = sol
        .history
        .last()
        .expect("a solution records at least one comparison");
    let warnings: Vec<String> = sol
        .warnings
        .iter()
        .map(|w| format!("\"{}\"", json_escape(w)))
        .collect();
    format!(
        "{{\n  \"P\": {},\n  \"Phat\": {},\n  \"K\": {},\n  \"Khat\": {},\n  \
         \"residP\": {},\n  \"residPhat\": {},\n  \"iterations\": {},\n  \
         \"warnings\": [{}]\n}}\n",
        fmt_matrix_json(sol.pair.p()),
        fmt_matrix_json(sol.pair.p_hat()),
        fmt_matrix_json(sol.gain.k()),
        fmt_matrix_json(sol.gain.k_hat()),
        fmt_float(last.resid_p),
        fmt_float(last.resid_phat),
        sol.iterations(),
        warnings.join(",")
    )
}

pub fn write_solution(path: &Path, sol: &GareSolution) -> Result<()> {
    fs::write(path, solution_json(sol))?;
    Ok(())
}

/// One JSON object per comparison, one per line: the scalar diagnostics
/// plus the full iterate (pair and improved gain).
pub fn history_jsonl(history: &[IterationRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&format!(
            "{{\"iteration\":{},\"deltaP\":{},\"deltaPhat\":{},\"residP\":{},\
             \"residPhat\":{},\"P\":{},\"Phat\":{},\"K\":{},\"Khat\":{}}}\n",
            rec.index,
            fmt_float(rec.delta_p),
            fmt_float(rec.delta_phat),
            fmt_float(rec.resid_p),
            fmt_float(rec.resid_phat),
            fmt_matrix_json(rec.pair.p()),
            fmt_matrix_json(rec.pair.p_hat()),
            fmt_matrix_json(rec.gain.k()),
            fmt_matrix_json(rec.gain.k_hat()),
        ));
    }
    out
}

pub fn write_history_jsonl(path: &Path, history: &[IterationRecord]) -> Result<()> {
    fs::write(path, history_jsonl(history))?;
    Ok(())
}

/// Plot-ready per-iteration diagnostics.
pub fn iterations_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,deltaP,deltaPhat,residP,residPhat\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.index,
            fmt_float(rec.delta_p),
            fmt_float(rec.delta_phat),
            fmt_float(rec.resid_p),
            fmt_float(rec.resid_phat),
        ));
    }
    out
}

pub fn write_iterations_csv(path: &Path, history: &[IterationRecord]) -> Result<()> {
    fs::write(path, iterations_csv(history))?;
    Ok(())
}

/// Plot-ready mean trajectory: one row per grid point, `time` followed by
/// the mean-state components.
pub fn mean_trajectory_csv(grid: &SimGrid, mean_path: &[DVector<f64>]) -> String {
    let n = mean_path.first().map_or(0, |v| v.len());
    let mut out = String::from("time");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (l, mp) in mean_path.iter().enumerate() {
        out.push_str(&fmt_float(l as f64 * grid.dt()));
        for v in mp.iter() {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_mean_trajectory_csv(
    path: &Path,
    grid: &SimGrid,
    mean_path: &[DVector<f64>],
) -> Result<()> {
    fs::write(path, mean_trajectory_csv(grid, mean_path))?;
    Ok(())
}

/// Columnar trajectory export: a header line
/// `n=<n> H=<paths> L=<steps> dt=<dt> seed=<seed>` followed by one row of
/// state coordinates per `(path, grid point)`, paths outermost.
pub fn bundle_text(bundle: &TrajectoryBundle) -> String {
    let n = bundle.state_dim();
    let grid = bundle.grid();
    let mut out = format!(
        "n={} H={} L={} dt={} seed={}\n",
        n,
        bundle.path_count(),
        grid.steps(),
        fmt_float(grid.dt()),
        bundle.seed(),
    );
    for h in 0..bundle.path_count() {
        for l in 0..=grid.steps() {
            let row = bundle.state_slice(h, l);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&fmt_float(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_bundle(path: &Path, bundle: &TrajectoryBundle) -> Result<()> {
    fs::write(path, bundle_text(bundle))?;
    Ok(())
}

#[derive(Deserialize)]
struct PairFile {
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(rename = "Phat")]
    p_hat: Vec<Vec<f64>>,
}

fn rows_to_square(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!(
            "{name} must be a nonempty square nested array"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, n, &flat))
}

/// Read a candidate Riccati pair from a JSON document with `P` and `Phat`
/// keys — the solution files written here qualify.
pub fn read_pair(path: &Path) -> Result<RiccatiPair> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    let file: PairFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    RiccatiPair::new(
        rows_to_square("P", &file.p)?,
        rows_to_square("Phat", &file.p_hat)?,
    )
}

#[derive(Deserialize)]
struct GainFile {
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    #[serde(rename = "Khat")]
    k_hat: Vec<Vec<f64>>,
}

fn rows_to_rect(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!(
            "{name} must be a nonempty rectangular nested array"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

/// Read a feedback gain from a JSON document with `K` and `Khat` keys —
/// again, solution files qualify.
pub fn read_gain(path: &Path) -> Result<FeedbackGain> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    let file: GainFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    FeedbackGain::new(
        rows_to_rect("K", &file.k)?,
        rows_to_rect("Khat", &file.k_hat)?,
    )
}
