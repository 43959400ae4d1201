//! Solvers for infinite-horizon mean-field linear-quadratic stochastic
//! control.
//!
//! The state follows a linear SDE whose drift and diffusion depend on the
//! state, the control, and their conditional expectations; the cost is
//! quadratic with matching mean terms. Optimal feedback is characterized by
//! a pair of generalized algebraic Riccati equations, and this crate solves
//! them along two independent routes:
//!
//! * **Model-based** ([`gare`]): policy iteration where each policy
//!   evaluation is an exact Lyapunov solve on the closed-loop coefficients.
//! * **Trajectory-driven** ([`rl`]): the same iteration, but each evaluation
//!   is a least-squares fit over simulated trajectories that never reads the
//!   drift matrices `A`, `Abar` — only the input/diffusion channels and the
//!   cost weights.
//!
//! The two routes cross-validate each other; [`gare::gare_residuals`] plugs
//! any candidate pair back into the Riccati equations for an independent
//! check. The [`sim`] module supplies the reproducible Euler–Maruyama
//! machinery both for the learning loop and for standalone Monte-Carlo
//! studies.

pub mod config;
pub mod error;
pub mod gare;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod report;
pub mod rl;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
