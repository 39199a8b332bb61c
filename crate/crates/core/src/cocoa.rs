//! CoCoA inner solver for a single least-squares task.
//!
//! Node `k` owns the columns `A_[k]` of the task and the matching entries
//! `x_[k]` of the estimate. One inner iteration:
//!
//! ```text
//! v̄    = (1/K) Σ_k v_k                  (ascending k)
//! Δx_k = (1/K) A_[k]⁺ (y − v̄)           (all k against the same v̄)
//! x_[k] += Δx_k
//! v_k   = v̄ + K A_[k] Δx_k
//! ```
//!
//! The aggregation parameter is fixed at σ' = K.
//!
//! When every block is broad and full rank (`p_k >= n`) the first iteration
//! already yields `v_k = y` for every node, so the solver stops moving after
//! one step. [`ClosedFormOperator`] gives that step directly as
//! `w = P w_prev + Ā y` with `Ā = (1/K)[A_[1]⁺; …; A_[K]⁺]` and `P = I − Ā A`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, pinv_with_rank, DenseMatrix, DenseVector};
use crate::tasks::{column_block, Partitioning, Task};

/// Relative step-norm threshold for the iterative early stop.
pub const DEFAULT_STOP_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolverMode {
    /// Closed form when every block has `p_k >= n` and full rank, iterative otherwise.
    #[default]
    Auto,
    Iterative,
    ClosedForm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CocoaConfig {
    /// Inner iteration budget `T_c`.
    pub inner_iterations: usize,
    pub mode: SolverMode,
    /// Iterative mode stops once `‖Δx‖ <= stop_tol · max(1, ‖x‖)`.
    /// Zero disables the early stop.
    pub stop_tol: f64,
}

impl Default for CocoaConfig {
    fn default() -> Self {
        Self {
            inner_iterations: 1,
            mode: SolverMode::Auto,
            stop_tol: DEFAULT_STOP_TOL,
        }
    }
}

impl CocoaConfig {
    pub fn iterative(inner_iterations: usize) -> Self {
        Self {
            inner_iterations,
            mode: SolverMode::Iterative,
            ..Self::default()
        }
    }

    pub fn closed_form() -> Self {
        Self {
            mode: SolverMode::ClosedForm,
            ..Self::default()
        }
    }
}

/// Column blocks of one task and their pseudoinverses.
#[derive(Clone, Debug)]
pub struct TaskBlocks {
    blocks: Vec<DenseMatrix>,
    pinvs: Vec<DenseMatrix>,
    ranks: Vec<usize>,
}

impl TaskBlocks {
    pub fn new(task: &Task, partition: &Partitioning) -> Result<Self> {
        let mut blocks = Vec::with_capacity(partition.nodes());
        let mut pinvs = Vec::with_capacity(partition.nodes());
        let mut ranks = Vec::with_capacity(partition.nodes());
        for k in 0..partition.nodes() {
            let block = column_block(task, partition, k)?;
            let (p, rank) = pinv_with_rank(&block)?;
            blocks.push(block);
            pinvs.push(p);
            ranks.push(rank);
        }
        Ok(Self {
            blocks,
            pinvs,
            ranks,
        })
    }

    pub fn nodes(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, k: usize) -> &DenseMatrix {
        &self.blocks[k]
    }

    pub fn block_pinv(&self, k: usize) -> &DenseMatrix {
        &self.pinvs[k]
    }

    /// Whether every block is broad (`p_k >= n`) with rank `n`.
    pub fn is_broad_full_rank(&self) -> bool {
        self.blocks
            .iter()
            .zip(&self.ranks)
            .all(|(b, &r)| b.cols() >= b.rows() && r == b.rows())
    }

    fn check_broad_full_rank(&self) -> Result<()> {
        for (k, (b, &r)) in self.blocks.iter().zip(&self.ranks).enumerate() {
            if b.cols() < b.rows() {
                return Err(Error::ClosedFormPrecondition(format!(
                    "block {k} has p_k = {} < n = {}",
                    b.cols(),
                    b.rows()
                )));
            }
            if r < b.rows() {
                return Err(Error::ClosedFormPrecondition(format!(
                    "block {k} has rank {r} < n = {}",
                    b.rows()
                )));
            }
        }
        Ok(())
    }

    /// `Ā = (1/K)` times the row-stack of the block pseudoinverses.
    pub fn abar(&self) -> DenseMatrix {
        let k = self.nodes() as f64;
        DenseMatrix::vstack(&self.pinvs)
            .expect("block pseudoinverses share the sample count")
            .scaled(1.0 / k)
    }
}

/// `(1/K) A_k⁺ (y − v̄)`.
pub fn local_step(
    block: &DenseMatrix,
    targets: &DenseVector,
    v_bar: &DenseVector,
    nodes: usize,
) -> Result<DenseVector> {
    if block.rows() != targets.len() || targets.len() != v_bar.len() {
        return Err(Error::dims(
            "local_step",
            format!("block rows == |y| == |v̄| ({})", block.rows()),
            format!("|y| = {}, |v̄| = {}", targets.len(), v_bar.len()),
        ));
    }
    let (p, _) = pinv_with_rank(block)?;
    let residual = targets.sub(v_bar);
    Ok(local_step_with_pinv(&p, residual.as_slice(), nodes))
}

pub(crate) fn local_step_with_pinv(block_pinv: &DenseMatrix, residual: &[f64], nodes: usize) -> DenseVector {
    let k = nodes as f64;
    let mut step = vec![0.0; block_pinv.rows()];
    block_pinv.mul_slice_into(residual, &mut step);
    for s in &mut step {
        *s /= k;
    }
    DenseVector::from_vec_unchecked(step)
}

/// `v_k = v̄ + K A_[k] Δx_k`.
pub(crate) fn local_share(block: &DenseMatrix, v_bar: &[f64], step: &DenseVector, nodes: usize) -> DenseVector {
    let k = nodes as f64;
    let v = (0..block.rows())
        .map(|i| v_bar[i] + k * dot(block.row(i), step.as_slice()))
        .collect();
    DenseVector::from_vec_unchecked(v)
}

/// Mean of the shares, summed in the given node order.
pub(crate) fn aggregate<'a>(shares: impl Iterator<Item = &'a DenseVector>, nodes: usize, len: usize) -> DenseVector {
    let mut sum = vec![0.0; len];
    for share in shares {
        for (s, v) in sum.iter_mut().zip(share.iter()) {
            *s += v;
        }
    }
    let k = nodes as f64;
    for s in &mut sum {
        *s /= k;
    }
    DenseVector::from_vec_unchecked(sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoaState {
    pub x: DenseVector,
    /// Per-node shares `v_k`, each of length `n`.
    pub v: Vec<DenseVector>,
    pub iteration: usize,
}

impl CocoaState {
    /// Initial state warm-started at `w_prev`: `x = w_prev` and
    /// `v_k = K A_[k] w_prev[k]`, so that `v̄ = A w_prev`.
    pub fn warm_start(w_prev: &DenseVector, task: &Task, partition: &Partitioning) -> Result<Self> {
        if w_prev.len() != task.params() {
            return Err(Error::dims("warm_start", task.params(), w_prev.len()));
        }
        let nodes = partition.nodes();
        let zeros = vec![0.0; task.samples()];
        let v = partition
            .ranges()
            .enumerate()
            .map(|(k, range)| {
                let block = column_block(task, partition, k)?;
                Ok(local_share(&block, &zeros, &w_prev.segment(range), nodes))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: w_prev.clone(),
            v,
            iteration: 0,
        })
    }

    /// `v̄ = (1/K) Σ_k v_k` in ascending node order.
    pub fn v_bar(&self) -> DenseVector {
        let len = self.v.first().map_or(0, DenseVector::len);
        aggregate(self.v.iter(), self.v.len(), len)
    }
}

/// Solver bound to one task and partition with the block pseudoinverses precomputed.
#[derive(Clone, Debug)]
pub struct CocoaSolver<'a> {
    task: &'a Task,
    partition: &'a Partitioning,
    blocks: Arc<TaskBlocks>,
}

/// Result of one inner iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// `‖Δx‖` over all nodes.
    pub step_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverPath {
    ClosedForm,
    Iterative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoaOutcome {
    pub x: DenseVector,
    pub path: SolverPath,
    pub iterations: usize,
    pub last_step_norm: f64,
}

impl<'a> CocoaSolver<'a> {
    pub fn new(task: &'a Task, partition: &'a Partitioning) -> Result<Self> {
        let blocks = Arc::new(TaskBlocks::new(task, partition)?);
        Ok(Self {
            task,
            partition,
            blocks,
        })
    }

    pub fn with_blocks(task: &'a Task, partition: &'a Partitioning, blocks: Arc<TaskBlocks>) -> Self {
        Self {
            task,
            partition,
            blocks,
        }
    }

    pub fn blocks(&self) -> &Arc<TaskBlocks> {
        &self.blocks
    }

    pub fn warm_start(&self, w_prev: &DenseVector) -> Result<CocoaState> {
        CocoaState::warm_start(w_prev, self.task, self.partition)
    }

    /// One inner iteration, in place.
    pub fn step(&self, state: &mut CocoaState) -> StepInfo {
        let nodes = self.partition.nodes();
        let v_bar = state.v_bar();
        let residual = self.task.targets().sub(&v_bar);
        let mut step_sq = 0.0;
        let x = state.x.as_mut_slice();
        for (k, range) in self.partition.ranges().enumerate() {
            let dx = local_step_with_pinv(self.blocks.block_pinv(k), residual.as_slice(), nodes);
            for (xi, d) in x[range].iter_mut().zip(dx.iter()) {
                *xi += d;
            }
            step_sq += dx.norm_squared();
            state.v[k] = local_share(self.blocks.block(k), v_bar.as_slice(), &dx, nodes);
        }
        state.iteration += 1;
        StepInfo {
            step_norm: step_sq.sqrt(),
        }
    }

    fn run_iterative(&self, w_init: &DenseVector, config: &CocoaConfig) -> Result<CocoaOutcome> {
        let mut state = self.warm_start(w_init)?;
        let mut last_step_norm = 0.0;
        for _ in 0..config.inner_iterations {
            last_step_norm = self.step(&mut state).step_norm;
            if last_step_norm <= config.stop_tol * state.x.norm().max(1.0) {
                break;
            }
        }
        Ok(CocoaOutcome {
            x: state.x,
            path: SolverPath::Iterative,
            iterations: state.iteration,
            last_step_norm,
        })
    }

    pub fn run(&self, w_init: &DenseVector, config: &CocoaConfig) -> Result<CocoaOutcome> {
        if w_init.len() != self.task.params() {
            return Err(Error::dims("run_cocoa", self.task.params(), w_init.len()));
        }
        let closed = match config.mode {
            SolverMode::Iterative => false,
            SolverMode::ClosedForm => {
                self.blocks.check_broad_full_rank()?;
                true
            }
            SolverMode::Auto => self.blocks.is_broad_full_rank(),
        };
        if !closed {
            return self.run_iterative(w_init, config);
        }
        let x = factored_update(&self.blocks.abar(), self.task, w_init);
        let last_step_norm = x.sub(w_init).norm();
        Ok(CocoaOutcome {
            x,
            path: SolverPath::ClosedForm,
            iterations: 1,
            last_step_norm,
        })
    }
}

/// `w + Ā (y − A w)`, algebraically equal to `P w + Ā y`.
pub(crate) fn factored_update(abar: &DenseMatrix, task: &Task, w: &DenseVector) -> DenseVector {
    let a = task.features();
    let mut residual = vec![0.0; a.rows()];
    a.mul_slice_into(w.as_slice(), &mut residual);
    for (r, y) in residual.iter_mut().zip(task.targets().iter()) {
        *r = y - *r;
    }
    let mut correction = vec![0.0; abar.rows()];
    abar.mul_slice_into(&residual, &mut correction);
    let out = w.iter().zip(&correction).map(|(a, b)| a + b).collect();
    DenseVector::from_vec_unchecked(out)
}

/// One inner iteration from `state`, returning the new state.
pub fn inner_iteration(state: &CocoaState, task: &Task, partition: &Partitioning) -> Result<CocoaState> {
    if state.x.len() != task.params()
        || state.v.len() != partition.nodes()
        || state.v.iter().any(|v| v.len() != task.samples())
    {
        return Err(Error::dims(
            "inner_iteration",
            format!("x of {} and {} shares of {}", task.params(), partition.nodes(), task.samples()),
            format!("x of {} and {} shares", state.x.len(), state.v.len()),
        ));
    }
    let solver = CocoaSolver::new(task, partition)?;
    let mut next = state.clone();
    solver.step(&mut next);
    Ok(next)
}

/// Runs the inner solver on `task` warm-started at `w_init`.
pub fn run_cocoa(
    task: &Task,
    partition: &Partitioning,
    w_init: &DenseVector,
    config: &CocoaConfig,
) -> Result<DenseVector> {
    Ok(CocoaSolver::new(task, partition)?.run(w_init, config)?.x)
}

/// One-step map of the overparameterized regime: `w ↦ P w + Ā y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormOperator {
    /// `P = I_p − Ā A`.
    pub projection: DenseMatrix,
    /// `Ā`, shape `p × n`.
    pub abar: DenseMatrix,
}

pub fn build_operator(task: &Task, partition: &Partitioning) -> Result<ClosedFormOperator> {
    let blocks = TaskBlocks::new(task, partition)?;
    ClosedFormOperator::from_blocks(task, &blocks)
}

impl ClosedFormOperator {
    pub fn from_blocks(task: &Task, blocks: &TaskBlocks) -> Result<Self> {
        blocks.check_broad_full_rank()?;
        let abar = blocks.abar();
        let abar_a = abar.matmul(task.features())?;
        let projection = DenseMatrix::identity(task.params()).sub(&abar_a)?;
        Ok(Self { projection, abar })
    }
}

/// `P w_prev + Ā y`.
pub fn closed_form_update(
    op: &ClosedFormOperator,
    w_prev: &DenseVector,
    targets: &DenseVector,
) -> Result<DenseVector> {
    let pw = op.projection.mul_vec(w_prev)?;
    let ay = op.abar.mul_vec(targets)?;
    Ok(pw.add(&ay))
}
