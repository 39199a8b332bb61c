//! Continual learning of linear models with the distributed CoCoA solver.
//!
//! `K` simulated nodes each own a contiguous block of columns of every task
//! and the matching entries of the parameter vector. Tasks arrive one after
//! another; each is solved by CoCoA warm-started from the previous estimate,
//! and the run is scored by forgetting, step size and distance to the
//! generating vector.
//!
//! - [`linalg`]: dense kernel, pseudoinverse, minimum-norm solves
//! - [`tasks`]: task generation, partitioning, schedules, stacked system
//! - [`cocoa`]: inner solver, iterative and closed-form
//! - [`netsim`]: the same solver as explicit message rounds
//! - [`continual`]: the outer loop over tasks
//! - [`metrics`]: losses, forgetting, offline oracle
//! - [`cli`]: experiment configs, presets, sweeps and CSV/SVG output
//! - [`selfcheck`]: cross-path equivalence and property checks

pub mod cli;
pub mod cocoa;
pub mod continual;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod netsim;
pub mod selfcheck;
pub mod tasks;

pub use error::{Error, Result};
