//! Scalar diagnostics of a continual run.
//!
//! Forgetting is measured on data fit: the mean squared residual over the
//! task occurrences presented so far, all evaluated at the current estimate.

use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, DenseVector};
use crate::tasks::{stack_offline, Task, TaskSequence};

/// Diagnostics at one evaluation step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// Outer step (1-based).
    pub t: usize,
    /// Mean loss over the first `t` presented tasks, repeats included.
    pub forgetting: f64,
    /// Mean loss over the distinct tasks presented so far.
    pub forgetting_unique: f64,
    /// `‖w_t − w_{t−1}‖² / ‖w_t‖²`.
    pub rel_step: f64,
    pub dist_to_gen: f64,
    /// Loss of every unique task at `w_t`, including tasks not yet presented.
    pub task_losses: Vec<f64>,
    pub diverged: bool,
}

/// `(1/n) ‖A w − y‖²`.
pub fn task_loss(task: &Task, w: &DenseVector) -> Result<f64> {
    if w.len() != task.params() {
        return Err(Error::dims("task_loss", task.params(), w.len()));
    }
    let r = task.features().mul_vec(w)?.sub(task.targets());
    Ok(r.norm_squared() / task.samples() as f64)
}

/// Loss of every unique task of the sequence, in id order.
pub fn task_losses(seq: &TaskSequence, w: &DenseVector) -> Result<Vec<f64>> {
    seq.tasks.iter().map(|task| task_loss(task, w)).collect()
}

/// How often each task id occurs among the first `t` outer steps; index `m - 1`.
pub fn occurrence_counts(seq: &TaskSequence, t: usize) -> Vec<usize> {
    let mut counts = vec![0; seq.tasks.len()];
    for &id in &seq.order[..t] {
        counts[id - 1] += 1;
    }
    counts
}

/// `Σ_m c_m ℓ_m / t`, summed in task-id order.
pub fn weighted_forgetting(losses: &[f64], counts: &[usize], t: usize) -> f64 {
    let total = losses
        .iter()
        .zip(counts)
        .fold(0.0, |acc, (&l, &c)| acc + c as f64 * l);
    total / t as f64
}

/// Mean loss over the distinct tasks that have occurred at least once.
pub fn unique_forgetting(losses: &[f64], counts: &[usize]) -> f64 {
    let (sum, seen) = losses
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .fold((0.0, 0usize), |(s, n), (&l, _)| (s + l, n + 1));
    if seen == 0 {
        0.0
    } else {
        sum / seen as f64
    }
}

/// Forgetting at step `t`: the mean of [`task_loss`] at `w` over the first
/// `t` entries of the presentation order.
pub fn forgetting(seq: &TaskSequence, w: &DenseVector, t: usize) -> Result<f64> {
    if t == 0 || t > seq.len() {
        return Err(Error::dims("forgetting", format!("t in 1..={}", seq.len()), t));
    }
    let counts = occurrence_counts(seq, t);
    let losses = seq
        .tasks
        .iter()
        .zip(&counts)
        .map(|(task, &c)| if c > 0 { task_loss(task, w) } else { Ok(0.0) })
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_forgetting(&losses, &counts, t))
}

/// `‖w_t − w_prev‖² / ‖w_t‖²`; `+∞` when `w_t` is zero.
pub fn relative_last_step(w_t: &DenseVector, w_prev: &DenseVector) -> f64 {
    let denom = w_t.norm_squared();
    if denom == 0.0 {
        return f64::INFINITY;
    }
    w_t.sub(w_prev).norm_squared() / denom
}

pub fn distance_to_generator(w: &DenseVector, generator: &DenseVector) -> Result<f64> {
    if w.len() != generator.len() {
        return Err(Error::dims("distance_to_generator", generator.len(), w.len()));
    }
    Ok(w.sub(generator).norm())
}

/// Minimum-norm solution of all tasks stacked into one centralized system.
pub fn offline_oracle(tasks: &[Task]) -> Result<DenseVector> {
    if tasks.is_empty() {
        return Err(Error::dims("offline_oracle", "at least one task", 0));
    }
    let (a, y) = stack_offline(tasks)?;
    min_norm_solve(&a, &y)
}
