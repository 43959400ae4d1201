//! Command-line front end: solve a problem (exactly or from trajectories),
//! check Riccati residuals for a stored pair, or simulate the closed loop
//! under a fixed gain.
//!
//! Exit codes: 0 success, 1 usage or parse failure, 2 violated mathematical
//! precondition, 3 numerical failure. With a fixed config and seed every
//! command writes byte-identical output files at any worker count; set
//! `MFLQ_THREADS` to cap the simulator's thread pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use mflq_core::config::{load_config, ProblemConfig};
use mflq_core::gare::{gare_residuals, solve_gare_model_based, MAX_ITERATIONS, MODEL_EPSILON};
use mflq_core::report::{
    fmt_float, read_gain, read_pair, write_bundle, write_history_jsonl, write_iterations_csv,
    write_mean_trajectory_csv, write_solution,
};
use mflq_core::rl::{run_policy_iteration, ModelFreeView};
use mflq_core::sim::{adaptive_grid, ensemble_statistics, simulate_closed_loop, SimGrid};
use mflq_core::{Error, ErrorClass, Result};

/// Step cap for `--adaptive-horizon` (10⁶ steps of the configured dt).
const ADAPTIVE_MAX_STEPS: usize = 1_000_000;

#[derive(Parser)]
#[command(
    name = "mflq",
    version,
    about = "Mean-field linear-quadratic control: exact and trajectory-driven policy iteration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coupled Riccati equations by policy iteration.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Evaluation route: exact Lyapunov solves, or least squares over
        /// simulated trajectories.
        #[arg(long, value_enum, default_value_t = Mode::Model)]
        mode: Mode,
    },
    /// Evaluate the Riccati residual norms of a stored pair.
    CheckGare {
        #[command(flatten)]
        common: Common,
        /// JSON file with "P" and "Phat" keys (solution files qualify).
        #[arg(long, value_name = "PATH")]
        pair_file: PathBuf,
    },
    /// Simulate the closed loop under a fixed gain and export trajectories.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// JSON file with "K" and "Khat" keys (defaults to the config's
        /// [gain] block; solution files qualify).
        #[arg(long, value_name = "PATH")]
        gain_file: Option<PathBuf>,
        /// Comma-separated initial state (defaults to all ones).
        #[arg(long, value_name = "V1,V2,...")]
        x0: Option<String>,
        /// How many sample paths the trajectory file stores; the mean
        /// trajectory always averages over all --paths.
        #[arg(long, value_name = "N", default_value_t = 15)]
        save_paths: usize,
        /// Extend the horizon until the exact mean trajectory has decayed,
        /// instead of using the configured step count.
        #[arg(long)]
        adaptive_horizon: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Model,
    Rl,
}

/// Flags shared by every command: the config file plus field overrides.
#[derive(Args)]
struct Common {
    /// Problem definition file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the Monte Carlo path count.
    #[arg(long, value_name = "H")]
    paths: Option<usize>,
    /// Override the number of grid steps.
    #[arg(long, value_name = "L")]
    steps: Option<usize>,
    /// Override the grid step size.
    #[arg(long, value_name = "F")]
    dt: Option<f64>,
    /// Override the stopping threshold.
    #[arg(long, value_name = "F")]
    epsilon: Option<f64>,
    /// Override the iteration cap.
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
}

impl Common {
    /// Load the config, apply the overrides, and surface load warnings.
    fn load(&self) -> Result<ProblemConfig> {
        let (mut cfg, warnings) = load_config(&self.config)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(paths) = self.paths {
            cfg.rl.paths = paths;
        }
        if self.dt.is_some() || self.steps.is_some() {
            cfg.grid = SimGrid::new(
                self.dt.unwrap_or(cfg.grid.dt()),
                self.steps.unwrap_or(cfg.grid.steps()),
            )?;
        }
        if let Some(eps) = self.epsilon {
            cfg.rl.epsilon = eps;
        }
        if let Some(mi) = self.max_iter {
            cfg.rl.max_iter = mi;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version surface as clap "errors" but are not failures.
            let failure = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(u8::from(failure));
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Precondition => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}

/// Cap the simulator's worker count from `MFLQ_THREADS`. Results are
/// identical at any count; the cap only controls CPU use.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MFLQ_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Error::InvalidInput(format!("MFLQ_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("cannot configure {threads} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { common, mode } => {
            let cfg = common.load()?;
            cmd_solve(&cfg, mode, common.epsilon, common.max_iter)
        }
        Command::CheckGare { common, pair_file } => {
            let cfg = common.load()?;
            cmd_check_gare(&cfg, &pair_file)
        }
        Command::Simulate {
            common,
            gain_file,
            x0,
            save_paths,
            adaptive_horizon,
        } => {
            let cfg = common.load()?;
            cmd_simulate(&cfg, gain_file.as_deref(), x0.as_deref(), save_paths, adaptive_horizon)
        }
    }
}

fn cmd_solve(
    cfg: &ProblemConfig,
    mode: Mode,
    epsilon_flag: Option<f64>,
    max_iter_flag: Option<usize>,
) -> Result<()> {
    let sol = match mode {
        Mode::Model => solve_gare_model_based(
            &cfg.system,
            &cfg.weights,
            cfg.gain.as_ref(),
            epsilon_flag.unwrap_or(MODEL_EPSILON),
            max_iter_flag.unwrap_or(MAX_ITERATIONS),
        )?,
        Mode::Rl => {
            let gain0 = cfg.gain.as_ref().ok_or_else(|| {
                Error::InvalidInput(
                    "the trajectory-driven solver needs a starting [gain] block".into(),
                )
            })?;
            run_policy_iteration(
                &cfg.system,
                &ModelFreeView::from_system(&cfg.system),
                &cfg.weights,
                gain0,
                &cfg.rl_config(),
            )?
        }
    };
    for w in &sol.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let solution = cfg.out_dir.join("solution.json");
    let history = cfg.out_dir.join("history.jsonl");
    let csv = cfg.out_dir.join("iterations.csv");
    write_solution(&solution, &sol)?;
    write_history_jsonl(&history, &sol.history)?;
    write_iterations_csv(&csv, &sol.history)?;
    let last = sol.history.last().expect("solutions record a comparison");
    println!("converged after {} iterations", sol.iterations());
    println!(
        "deltaP={} deltaPhat={}",
        fmt_float(last.delta_p),
        fmt_float(last.delta_phat)
    );
    println!(
        "residP={} residPhat={}",
        fmt_float(last.resid_p),
        fmt_float(last.resid_phat)
    );
    for path in [&solution, &history, &csv] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_check_gare(cfg: &ProblemConfig, pair_file: &Path) -> Result<()> {
    let pair = read_pair(pair_file)?;
    let resid = gare_residuals(&cfg.system, &cfg.weights, &pair)?;
    let (resid_p, resid_phat) = resid.norms();
    println!("residP={}", fmt_float(resid_p));
    println!("residPhat={}", fmt_float(resid_phat));
    println!("innerPD={}", resid.inner_pd);
    println!("innerHatPD={}", resid.inner_hat_pd);
    Ok(())
}

fn parse_x0(raw: Option<&str>, n: usize) -> Result<DVector<f64>> {
    let Some(raw) = raw else {
        return Ok(DVector::from_element(n, 1.0));
    };
    let vals: Vec<f64> = raw
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("--x0: {t:?} is not a number")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(Error::Dimension(format!(
            "--x0 has {} components but the problem has n = {n}",
            vals.len()
        )));
    }
    Ok(DVector::from_column_slice(&vals))
}

fn cmd_simulate(
    cfg: &ProblemConfig,
    gain_file: Option<&Path>,
    x0_raw: Option<&str>,
    save_paths: usize,
    adaptive_horizon: bool,
) -> Result<()> {
    let gain = match gain_file {
        Some(path) => read_gain(path)?,
        None => cfg.gain.clone().ok_or_else(|| {
            Error::InvalidInput("no gain available: add a [gain] block or pass --gain-file".into())
        })?,
    };
    let x0 = parse_x0(x0_raw, cfg.n())?;
    let grid = if adaptive_horizon {
        adaptive_grid(&cfg.system, &gain, &x0, cfg.grid.dt(), ADAPTIVE_MAX_STEPS)?
    } else {
        cfg.grid
    };
    let paths = cfg.rl.paths;
    let stats = ensemble_statistics(&cfg.system, &gain, &x0, &grid, paths, cfg.seed)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mean_csv = cfg.out_dir.join("mean_trajectory.csv");
    write_mean_trajectory_csv(&mean_csv, &grid, &stats.mean_path)?;
    let trajectories = cfg.out_dir.join("trajectories.txt");
    let stored = save_paths.min(paths);
    if stored > 0 {
        let bundle = simulate_closed_loop(&cfg.system, &gain, &x0, &grid, stored, cfg.seed)?;
        write_bundle(&trajectories, &bundle)?;
    }
    println!(
        "simulated {paths} paths over T={} (L={}, dt={})",
        fmt_float(grid.horizon()),
        grid.steps(),
        fmt_float(grid.dt())
    );
    println!(
        "decayed={} terminalRatio={}",
        stats.decay.decayed,
        fmt_float(stats.decay.ratio)
    );
    println!("wrote {}", mean_csv.display());
    if stored > 0 {
        println!("wrote {} ({stored} stored paths)", trajectories.display());
    }
    Ok(())
}
