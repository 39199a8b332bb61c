//! Outer loop over the task sequence.
//!
//! Starting from `w_0 = 0`, every outer step solves the presented task with
//! the inner solver warm-started at the previous estimate. Metrics are taken
//! every `eval_stride` steps and at the final step.

use std::sync::Arc;

use rayon::prelude::*;

use crate::cocoa::{factored_update, CocoaConfig, CocoaSolver, CocoaState, SolverMode, TaskBlocks};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::metrics::{
    distance_to_generator, relative_last_step, task_losses, unique_forgetting, weighted_forgetting,
    MetricRecord,
};
use crate::tasks::{Partitioning, Task, TaskSequence};

/// Runs abort once `‖w_t‖` exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinualConfig {
    pub cocoa: CocoaConfig,
    pub eval_stride: usize,
    /// Keep every `w_t` instead of only the evaluated ones.
    pub record_w: bool,
}

impl ContinualConfig {
    pub fn new(cocoa: CocoaConfig, eval_stride: usize) -> Self {
        Self {
            cocoa,
            eval_stride,
            record_w: false,
        }
    }
}

/// Evaluation stride for `M` unique tasks: the whole number of cycles
/// closest to 1000 outer steps, at least one cycle. Ties round down.
pub fn default_eval_stride(unique_tasks: usize) -> usize {
    let m = unique_tasks.max(1);
    let lo = (1000 / m).max(1);
    // ties go to the shorter stride
    let cycles = if (lo + 1) * m - 1000 < 1000usize.saturating_sub(lo * m) {
        lo + 1
    } else {
        lo
    };
    m * cycles
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    /// One record per evaluation, strictly increasing in `t`.
    pub records: Vec<MetricRecord>,
    /// Estimate after the last completed step, or the offending estimate of a diverged run.
    pub final_w: DenseVector,
    /// Outer steps executed.
    pub steps: usize,
    pub diverged_at: Option<usize>,
    /// `(t, w_t)` at evaluation steps, or at every step with `record_w`. Includes `(0, w_0)`.
    pub history: Vec<(usize, DenseVector)>,
}

impl RunTrace {
    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Initial inner-solver state for a task, warm-started at `w_prev`.
pub fn warm_start(w_prev: &DenseVector, task: &Task, partition: &Partitioning) -> Result<CocoaState> {
    CocoaState::warm_start(w_prev, task, partition)
}

/// Cached per-task solver data.
struct Prepared {
    blocks: Arc<TaskBlocks>,
    /// `Ā` when the closed form applies.
    abar: Option<DenseMatrix>,
}

fn prepare(task: &Task, partition: &Partitioning, mode: SolverMode) -> Result<Prepared> {
    let blocks = Arc::new(TaskBlocks::new(task, partition)?);
    let closed = match mode {
        SolverMode::Iterative => false,
        SolverMode::Auto => blocks.is_broad_full_rank(),
        SolverMode::ClosedForm => {
            if !blocks.is_broad_full_rank() {
                return Err(Error::ClosedFormPrecondition(format!(
                    "task {} has a block that is not broad and full rank",
                    task.id()
                )));
            }
            true
        }
    };
    let abar = closed.then(|| blocks.abar());
    Ok(Prepared { blocks, abar })
}

fn is_diverged(w: &DenseVector) -> bool {
    !w.is_finite() || w.norm() > DIVERGENCE_THRESHOLD
}

pub fn run_continual(
    seq: &TaskSequence,
    partition: &Partitioning,
    reference: &DenseVector,
    config: &ContinualConfig,
) -> Result<RunTrace> {
    if config.eval_stride == 0 {
        return Err(Error::config("eval_stride", "must be at least 1"));
    }
    let p = partition.params();
    if reference.len() != p {
        return Err(Error::dims("run_continual", p, reference.len()));
    }
    if let Some(task) = seq.tasks.iter().find(|t| t.params() != p) {
        return Err(Error::dims("run_continual", p, task.params()));
    }

    let prepared = seq
        .tasks
        .par_iter()
        .map(|task| prepare(task, partition, config.cocoa.mode))
        .collect::<Result<Vec<_>>>()?;

    let total = seq.len();
    let mut counts = vec![0usize; seq.tasks.len()];
    let mut w = DenseVector::zeros(p);
    let mut trace = RunTrace {
        records: Vec::new(),
        final_w: w.clone(),
        steps: 0,
        diverged_at: None,
        history: vec![(0, w.clone())],
    };

    for t in 1..=total {
        let id = seq.order[t - 1];
        let task = seq.task(id);
        let prep = &prepared[id - 1];
        let next = match &prep.abar {
            Some(abar) => factored_update(abar, task, &w),
            None => {
                CocoaSolver::with_blocks(task, partition, Arc::clone(&prep.blocks))
                    .run(&w, &config.cocoa)?
                    .x
            }
        };
        counts[id - 1] += 1;
        trace.steps = t;

        let diverged = is_diverged(&next);
        let evaluate = diverged || t % config.eval_stride == 0 || t == total;
        if evaluate {
            trace.records.push(evaluate_at(seq, &counts, t, &next, &w, reference, diverged)?);
        }
        if config.record_w || evaluate {
            trace.history.push((t, next.clone()));
        }
        w = next;
        if diverged {
            trace.diverged_at = Some(t);
            break;
        }
    }
    trace.final_w = w;
    Ok(trace)
}

fn evaluate_at(
    seq: &TaskSequence,
    counts: &[usize],
    t: usize,
    w: &DenseVector,
    w_prev: &DenseVector,
    reference: &DenseVector,
    diverged: bool,
) -> Result<MetricRecord> {
    let task_losses = task_losses(seq, w)?;
    Ok(MetricRecord {
        t,
        forgetting: weighted_forgetting(&task_losses, counts, t),
        forgetting_unique: unique_forgetting(&task_losses, counts),
        rel_step: relative_last_step(w, w_prev),
        dist_to_gen: distance_to_generator(w, reference)?,
        task_losses,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocoa::{build_operator, closed_form_update, ClosedFormOperator};
    use crate::metrics::{forgetting, task_loss};
    use crate::tasks::{build_sequence, make_partition, GeneratorSpec, TaskSchedule};

    fn standard_partition() -> Partitioning {
        make_partition(160, &[16, 32, 48, 64]).unwrap()
    }

    fn run(seq: &TaskSequence, part: &Partitioning, cfg: ContinualConfig) -> RunTrace {
        run_continual(seq, part, &DenseVector::ones(part.params()), &cfg).unwrap()
    }

    #[test]
    fn default_stride_aligns_with_cycles() {
        assert_eq!(default_eval_stride(1), 1000);
        assert_eq!(default_eval_stride(40), 1000);
        assert_eq!(default_eval_stride(80), 960);
        assert_eq!(default_eval_stride(150), 1050);
        assert_eq!(default_eval_stride(3000), 3000);
    }

    #[test]
    fn warm_start_examples() {
        let g = GeneratorSpec::shared_ones(12);
        let seq = build_sequence(&TaskSchedule::one_shot(1), &g, 3, 12, 1).unwrap();
        let task = &seq.tasks[0];
        let part = make_partition(12, &[5, 7]).unwrap();
        let zero = warm_start(&DenseVector::zeros(12), task, &part).unwrap();
        assert!(zero.v.iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let w = DenseVector::new((0..12).map(|i| i as f64 - 4.5).collect()).unwrap();
        let single = warm_start(&w, task, &Partitioning::single(12).unwrap()).unwrap();
        assert_eq!(single.v[0], task.features().mul_vec(&w).unwrap());
        let split = warm_start(&w, task, &part).unwrap();
        let aw = task.features().mul_vec(&w).unwrap();
        assert!(split.v_bar().sub(&aw).max_abs() <= 1e-12 * aw.max_abs());
    }

    #[test]
    fn first_step_from_zero_is_abar_y() {
        let part = standard_partition();
        let g = GeneratorSpec::shared_ones(160);
        let seq = build_sequence(&TaskSchedule::one_shot(1), &g, 10, 160, 2).unwrap();
        let trace = run(&seq, &part, ContinualConfig::new(CocoaConfig::default(), 1));
        let op = build_operator(&seq.tasks[0], &part).unwrap();
        let expected = op.abar.mul_vec(seq.tasks[0].targets()).unwrap();
        assert!(trace.final_w.sub(&expected).max_abs() <= 1e-12 * expected.max_abs());
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].rel_step, 1.0);
    }

    #[test]
    fn latest_task_is_always_solved() {
        let part = standard_partition();
        let g = GeneratorSpec::shared_ones(160);
        let seq = build_sequence(&TaskSchedule::cyclic(7, 3), &g, 6, 160, 3).unwrap();
        let mut cfg = ContinualConfig::new(CocoaConfig::default(), 1);
        cfg.record_w = true;
        let trace = run(&seq, &part, cfg);
        assert_eq!(trace.history.len(), seq.len() + 1);
        for (t, w) in &trace.history[1..] {
            let task = seq.task_at(*t);
            let r = task.features().mul_vec(w).unwrap().sub(task.targets());
            assert!(r.norm() <= 1e-9 * task.targets().norm(), "t = {t}");
        }
    }

    #[test]
    fn recurrence_matches_explicit_operator() {
        let part = standard_partition();
        let g = GeneratorSpec::shared_ones(160);
        let seq = build_sequence(&TaskSchedule::cyclic(5, 4), &g, 8, 160, 4).unwrap();
        let mut cfg = ContinualConfig::new(CocoaConfig::closed_form(), 1);
        cfg.record_w = true;
        let trace = run(&seq, &part, cfg);
        let ops: Vec<ClosedFormOperator> = seq.tasks.iter().map(|t| build_operator(t, &part).unwrap()).collect();
        for window in trace.history.windows(2) {
            let ((_, prev), (t, w)) = (&window[0], &window[1]);
            let task = seq.task_at(*t);
            let explicit = closed_form_update(&ops[task.id() - 1], prev, task.targets()).unwrap();
            assert!(w.sub(&explicit).max_abs() <= 1e-12 * explicit.max_abs().max(1.0));
        }
    }

    #[test]
    fn records_and_forgetting_columns() {
        let part = standard_partition();
        let g = GeneratorSpec::shared_ones(160);
        let seq = build_sequence(&TaskSchedule::cyclic(4, 5), &g, 3, 160, 5).unwrap();
        let trace = run(&seq, &part, ContinualConfig::new(CocoaConfig::default(), 3));
        let ts: Vec<usize> = trace.records.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![3, 6, 9, 12, 15, 18, 20]);
        for rec in &trace.records {
            let w = &trace.history.iter().find(|(t, _)| *t == rec.t).unwrap().1;
            let f = forgetting(&seq, w, rec.t).unwrap();
            assert!((rec.forgetting - f).abs() <= 1e-12 * f.max(1e-300));
            assert_eq!(rec.task_losses.len(), 4);
            assert!((rec.task_losses[1] - task_loss(&seq.tasks[1], w).unwrap()).abs() <= 1e-12 * rec.task_losses[1]);
        }
        // full cycles: both averages coincide
        let last = trace.last().unwrap();
        assert!((last.forgetting - last.forgetting_unique).abs() <= 1e-12 * last.forgetting.max(1e-300));
    }

    #[test]
    fn underparameterized_tasks_recover_generator() {
        let part = make_partition(8, &[4, 4]).unwrap();
        let g = GeneratorSpec::shared_ones(8);
        let seq = build_sequence(&TaskSchedule::cyclic(3, 2), &g, 20, 8, 6).unwrap();
        let cfg = ContinualConfig::new(CocoaConfig { inner_iterations: 20_000, ..CocoaConfig::default() }, 1);
        let trace = run(&seq, &part, cfg);
        assert!(trace.final_w.sub(&DenseVector::ones(8)).max_abs() <= 1e-6);
    }

    #[test]
    fn identical_inputs_give_identical_traces() {
        let part = standard_partition();
        let g = GeneratorSpec::alternating_default(160);
        let seq = build_sequence(&TaskSchedule::cyclic(6, 10), &g, 2, 160, 9).unwrap();
        let cfg = ContinualConfig::new(CocoaConfig::default(), 6);
        assert_eq!(run(&seq, &part, cfg), run(&seq, &part, cfg));
    }

    #[test]
    fn divergence_is_recorded_not_fatal() {
        // Two single-sample tasks on two one-column nodes: the cycle map
        // P₂P₁ has eigenvalues {0, 1.5625}, so the error grows every cycle.
        let part = make_partition(2, &[1, 1]).unwrap();
        let t1 = Task::new(1, DenseMatrix::new(1, 2, vec![1.0, 2.0]).unwrap(), DenseVector::new(vec![3.0]).unwrap()).unwrap();
        let t2 = Task::new(2, DenseMatrix::new(1, 2, vec![2.0, 1.0]).unwrap(), DenseVector::new(vec![3.0]).unwrap()).unwrap();
        let seq = TaskSequence::new(vec![t1, t2], TaskSchedule::cyclic(2, 20_000).sequence()).unwrap();
        let trace = run_continual(&seq, &part, &DenseVector::ones(2), &ContinualConfig::new(CocoaConfig::default(), 100)).unwrap();
        let at = trace.diverged_at.expect("run should trip the divergence guard");
        assert_eq!(trace.steps, at);
        let last = trace.last().unwrap();
        assert!(last.diverged);
        assert_eq!(last.t, at);
        assert!(trace.records[..trace.records.len() - 1].iter().all(|r| !r.diverged));
    }

    #[test]
    fn closed_form_mode_rejects_tall_blocks() {
        let part = make_partition(8, &[4, 4]).unwrap();
        let g = GeneratorSpec::shared_ones(8);
        let seq = build_sequence(&TaskSchedule::one_shot(2), &g, 6, 8, 1).unwrap();
        let cfg = ContinualConfig::new(CocoaConfig::closed_form(), 1);
        assert!(run_continual(&seq, &part, &DenseVector::ones(8), &cfg).is_err());
        let bad_stride = ContinualConfig::new(CocoaConfig::default(), 0);
        assert!(run_continual(&seq, &part, &DenseVector::ones(8), &bad_stride).is_err());
    }
}
