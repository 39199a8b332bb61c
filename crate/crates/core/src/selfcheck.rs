//! Fixed-seed property suites across modules.
//!
//! Each check stops at its first failing instance and reports the seed so
//! the instance can be rebuilt. The closed-form, iterative and message-passing
//! paths are compared against each other; the pseudoinverse against the
//! Penrose conditions; the solver against its one-step and underparameterized
//! convergence properties.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cocoa::{build_operator, closed_form_update, run_cocoa, CocoaConfig, CocoaSolver};
use crate::continual::{run_continual, ContinualConfig};
use crate::error::Result;
use crate::linalg::{matmul, min_norm_solve, pinv, pinv_with_rank, DenseMatrix, DenseVector};
use crate::metrics::{forgetting, offline_oracle, task_loss};
use crate::netsim::{spawn_network, AggregationOrder};
use crate::tasks::{
    build_sequence, column_block, gen_gaussian_task, make_partition, stack_offline, GeneratorSpec,
    Partitioning, Task, TaskSchedule,
};

/// Knobs for mutation testing of the checks themselves.
#[derive(Clone, Copy, Debug, Default)]
pub struct SelfcheckOptions {
    /// Aggregation order used on the message-passing path.
    pub aggregation_order: AggregationOrder,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Seed of the first failing instance.
    pub seed: Option<u64>,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} {:>7.3}s  {}", self.name, self.seconds, self.detail)?;
        if let Some(seed) = self.seed {
            write!(f, " (seed {seed})")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.passed)
    }
}

impl fmt::Display for SelfcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

/// Outcome of one check: `Ok(summary)` or the seed and reason of the first failure.
type Outcome = std::result::Result<String, (Option<u64>, String)>;

fn fail(seed: u64, reason: impl Into<String>) -> Outcome {
    Err((Some(seed), reason.into()))
}

fn lift<T>(seed: u64, r: Result<T>) -> std::result::Result<T, (Option<u64>, String)> {
    r.map_err(|e| (Some(seed), e.to_string()))
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DenseMatrix::new(rows, cols, data).expect("gaussian entries are finite")
}

pub fn gaussian_vector(len: usize, seed: u64) -> DenseVector {
    DenseVector::new(gaussian_matrix(1, len, seed).as_slice().to_vec()).expect("finite")
}

/// Largest entrywise difference relative to the largest entry of either vector.
pub fn max_rel_diff(a: &DenseVector, b: &DenseVector) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b).max_abs() / scale
}

fn standard_partition() -> Partitioning {
    make_partition(160, &[16, 32, 48, 64]).expect("valid partition")
}

fn standard_task(n: usize, seed: u64) -> Task {
    gen_gaussian_task(1, n, 160, &DenseVector::ones(160), seed).expect("valid dimensions")
}

fn fro(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY)
}

fn check_penrose() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let rank2 = lift(seed, matmul(&gaussian_matrix(3, 2, seed), &gaussian_matrix(2, 3, seed + 1000)))?;
        let cases = [
            gaussian_matrix(2, 5, seed),
            gaussian_matrix(5, 2, seed),
            gaussian_matrix(4, 4, seed),
            rank2,
        ];
        for m in &cases {
            let mp = lift(seed, pinv(m))?;
            let m_mp = lift(seed, matmul(m, &mp))?;
            let mp_m = lift(seed, matmul(&mp, m))?;
            let c1 = fro(&lift(seed, matmul(&m_mp, m))?, m) / m.frobenius_norm();
            let c2 = fro(&lift(seed, matmul(&mp_m, &mp))?, &mp) / mp.frobenius_norm();
            let c3 = fro(&m_mp, &m_mp.transpose());
            let c4 = fro(&mp_m, &mp_m.transpose());
            let err = c1.max(c2).max(c3).max(c4);
            worst = worst.max(err);
            if err > 1e-9 {
                return fail(seed, format!("Penrose residual {err:.3e} for shape {:?}", m.shape()));
            }
        }
    }
    Ok(format!("worst residual {worst:.2e}"))
}

fn check_broad_right_inverse() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..40u64 {
        let rows = 1 + (seed as usize % 10);
        let cols = [16, 32, 48, 64][seed as usize % 4].max(rows);
        let m = gaussian_matrix(rows, cols, seed);
        let prod = lift(seed, matmul(&m, &lift(seed, pinv(&m))?))?;
        let err = fro(&prod, &DenseMatrix::identity(rows));
        worst = worst.max(err);
        if err > 1e-9 {
            return fail(seed, format!("‖M M⁺ − I‖ = {err:.3e} for {rows}x{cols}"));
        }
    }
    Ok(format!("worst ‖MM⁺ − I‖ {worst:.2e}"))
}

fn check_min_norm_vs_pinv() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..40u64 {
        let rows = 1 + seed as usize % 7;
        let cols = 1 + (seed as usize / 7) % 9;
        let a = gaussian_matrix(rows, cols, seed);
        let y = gaussian_vector(rows, seed + 500);
        let direct = lift(seed, min_norm_solve(&a, &y))?;
        let via = lift(seed, lift(seed, pinv(&a))?.mul_vec(&y))?;
        let err = max_rel_diff(&direct, &via);
        worst = worst.max(err);
        if err > 1e-12 {
            return fail(seed, format!("min_norm_solve vs pinv·y differ by {err:.3e}"));
        }
    }
    Ok(format!("worst relative difference {worst:.2e}"))
}

fn check_tasks() -> Outcome {
    let part = standard_partition();
    for seed in 0..10u64 {
        let g = GeneratorSpec::shared_ones(160);
        let seq = lift(seed, build_sequence(&TaskSchedule::one_shot(4), &g, 1 + seed as usize, 160, seed))?;
        for task in &seq.tasks {
            let r = lift(seed, task.features().mul_vec(g.reference()))?.sub(task.targets());
            if r.norm() > 1e-12 * task.targets().norm() {
                return fail(seed, format!("task {} violates y = A w★", task.id()));
            }
            let again = lift(seed, gen_gaussian_task(task.id(), task.samples(), 160, g.reference(), seed))?;
            if &again != task {
                return fail(seed, "task generation is not a pure function of its inputs");
            }
            let blocks: Vec<_> = (0..4).map(|k| column_block(task, &part, k)).collect::<Result<_>>().map_err(|e| (Some(seed), e.to_string()))?;
            if &lift(seed, DenseMatrix::hstack(&blocks))? != task.features() {
                return fail(seed, "column blocks do not reassemble the task");
            }
        }
    }
    Ok("generator consistency, purity and block cover hold".into())
}

fn check_one_step_convergence() -> Outcome {
    let part = standard_partition();
    let (mut worst_res, mut worst_step): (f64, f64) = (0.0, 0.0);
    for seed in 0..100u64 {
        let task = standard_task(10, seed);
        let solver = lift(seed, CocoaSolver::new(&task, &part))?;
        let mut state = lift(seed, solver.warm_start(&gaussian_vector(160, seed + 10_000)))?;
        solver.step(&mut state);
        let res = lift(seed, task.features().mul_vec(&state.x))?.sub(task.targets()).norm() / task.targets().norm();
        let step = solver.step(&mut state).step_norm / state.x.norm();
        worst_res = worst_res.max(res);
        worst_step = worst_step.max(step);
        if res > 1e-9 {
            return fail(seed, format!("relative residual {res:.3e} after the first iteration"));
        }
        if step > 1e-12 {
            return fail(seed, format!("second step ‖Δx‖/‖x‖ = {step:.3e}"));
        }
    }
    Ok(format!("residual ≤ {worst_res:.2e}, second step ≤ {worst_step:.2e}"))
}

fn check_path_equivalence(opts: &SelfcheckOptions) -> Outcome {
    let part = standard_partition();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let n = 1 + seed as usize % 10;
        let task = standard_task(n, seed);
        let w = gaussian_vector(160, seed + 20_000);
        let op = lift(seed, build_operator(&task, &part))?;
        let closed = lift(seed, closed_form_update(&op, &w, task.targets()))?;
        let iterative = lift(seed, run_cocoa(&task, &part, &w, &CocoaConfig::iterative(1)))?;
        let mut net = lift(seed, spawn_network(&task, &part, &w))?;
        net.set_aggregation_order(opts.aggregation_order);
        lift(seed, net.run_round())?;
        let networked = net.x();
        let err = max_rel_diff(&closed, &iterative).max(max_rel_diff(&closed, &networked));
        worst = worst.max(err);
        if err > 1e-12 {
            return fail(seed, format!("paths differ by {err:.3e} at n = {n}"));
        }
    }
    Ok(format!("worst relative difference {worst:.2e}"))
}

fn check_network_bitwise(opts: &SelfcheckOptions) -> Outcome {
    for seed in 0..10u64 {
        let sizes = [[4, 4, 4, 4], [2, 6, 3, 5], [8, 3, 3, 2]][seed as usize % 3];
        let part = lift(seed, make_partition(16, &sizes))?;
        let task = lift(seed, gen_gaussian_task(1, 24, 16, &DenseVector::ones(16), seed))?;
        let w = gaussian_vector(16, seed + 30_000);
        let rounds = 150;
        let cfg = CocoaConfig {
            stop_tol: 0.0,
            ..CocoaConfig::iterative(rounds)
        };
        let mono = lift(seed, run_cocoa(&task, &part, &w, &cfg))?;
        let mut net = lift(seed, spawn_network(&task, &part, &w))?;
        net.set_aggregation_order(opts.aggregation_order);
        net.set_parallel(true);
        for _ in 0..rounds {
            lift(seed, net.run_round())?;
        }
        if net.x().as_slice() != mono.as_slice() {
            return fail(seed, "message-passing estimate differs bitwise from the monolithic solver");
        }
        if net.coordinator.messages() != 2 * part.nodes() * rounds {
            return fail(seed, format!("{} messages for {rounds} rounds", net.coordinator.messages()));
        }
        let again = lift(seed, run_cocoa(&task, &part, &w, &cfg))?;
        if again.as_slice() != mono.as_slice() {
            return fail(seed, "repeated solve is not bit-identical");
        }
    }
    Ok("bit-identical over 150 rounds, 2K messages per round".into())
}

fn check_single_node_exact() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let n = 2 + seed as usize % 8;
        let task = lift(seed, gen_gaussian_task(1, n, n, &gaussian_vector(n, seed + 1), seed))?;
        let part = lift(seed, Partitioning::single(n))?;
        let x = lift(seed, run_cocoa(&task, &part, &gaussian_vector(n, seed + 2), &CocoaConfig::iterative(1)))?;
        let direct = lift(seed, min_norm_solve(task.features(), task.targets()))?;
        let err = x.sub(&direct).max_abs();
        worst = worst.max(err);
        if err > 1e-10 {
            return fail(seed, format!("single-node solve off by {err:.3e}"));
        }
    }
    Ok(format!("worst error {worst:.2e}"))
}

/// Iterative solve of an underparameterized task, checked every 100 iterations.
/// Returns the iteration count at which `‖x − w★‖/‖w★‖ <= 1e-6`.
pub fn underparameterized_convergence(seed: u64) -> std::result::Result<usize, String> {
    let part = make_partition(8, &[4, 4]).map_err(|e| e.to_string())?;
    let w_star = DenseVector::ones(8);
    let task = gen_gaussian_task(1, 32, 8, &w_star, seed).map_err(|e| e.to_string())?;
    let solver = CocoaSolver::new(&task, &part).map_err(|e| e.to_string())?;
    let mut state = solver.warm_start(&DenseVector::zeros(8)).map_err(|e| e.to_string())?;
    let residual = |x: &DenseVector| {
        task.features()
            .mul_vec(x)
            .map(|ax| ax.sub(task.targets()).norm())
            .unwrap_or(f64::NAN)
    };
    let mut prev = residual(&state.x);
    while state.iteration < 100_000 {
        for _ in 0..100 {
            solver.step(&mut state);
        }
        let r = residual(&state.x);
        if r > prev {
            return Err(format!("residual rose from {prev:.3e} to {r:.3e} at iteration {}", state.iteration));
        }
        prev = r;
        if state.x.sub(&w_star).norm() / w_star.norm() <= 1e-6 {
            return Ok(state.iteration);
        }
    }
    Err("no convergence within 100000 iterations".into())
}

fn check_underparameterized() -> Outcome {
    let mut slowest = 0;
    for seed in 0..20u64 {
        match underparameterized_convergence(seed) {
            Ok(it) => slowest = slowest.max(it),
            Err(reason) => return fail(seed, reason),
        }
    }
    Ok(format!("converged within {slowest} iterations"))
}

fn check_continual_properties() -> Outcome {
    let part = standard_partition();
    for seed in 0..5u64 {
        let g = GeneratorSpec::shared_ones(160);
        let seq = lift(seed, build_sequence(&TaskSchedule::cyclic(6, 5), &g, 4, 160, seed))?;
        let mut cfg = ContinualConfig::new(CocoaConfig::closed_form(), 6);
        cfg.record_w = true;
        let trace = lift(seed, run_continual(&seq, &part, g.reference(), &cfg))?;
        let again = lift(seed, run_continual(&seq, &part, g.reference(), &cfg))?;
        if trace != again {
            return fail(seed, "continual run is not deterministic");
        }
        let ops: Vec<_> = seq.tasks.iter().map(|t| build_operator(t, &part)).collect::<Result<_>>().map_err(|e| (Some(seed), e.to_string()))?;
        for pair in trace.history.windows(2) {
            let ((_, prev), (t, w)) = (&pair[0], &pair[1]);
            let task = seq.task_at(*t);
            let r = lift(seed, task.features().mul_vec(w))?.sub(task.targets()).norm();
            if r > 1e-9 * task.targets().norm() {
                return fail(seed, format!("latest task not solved at t = {t}"));
            }
            let explicit = lift(seed, closed_form_update(&ops[task.id() - 1], prev, task.targets()))?;
            if max_rel_diff(w, &explicit) > 1e-12 {
                return fail(seed, format!("recurrence mismatch at t = {t}"));
            }
        }
    }
    Ok("latest-task interpolation, recurrence fidelity and determinism hold".into())
}

fn check_metrics() -> Outcome {
    for seed in 0..10u64 {
        let g = GeneratorSpec::shared_ones(40);
        let seq = lift(seed, build_sequence(&TaskSchedule::cyclic(5, 3), &g, 3, 40, seed))?;
        let w = gaussian_vector(40, seed + 40_000);
        for t in [1, 4, 5, 11, 15] {
            let mut sum = 0.0;
            for i in 1..=t {
                let task = seq.task_at(i);
                let r = lift(seed, task.features().mul_vec(&w))?.sub(task.targets());
                sum += r.iter().map(|x| x * x).sum::<f64>() / task.samples() as f64;
            }
            let literal = sum / t as f64;
            let f = lift(seed, forgetting(&seq, &w, t))?;
            if (f - literal).abs() > 1e-12 * literal {
                return fail(seed, format!("forgetting({t}) = {f} but literal mean is {literal}"));
            }
        }
        let task = &seq.tasks[0];
        let base = lift(seed, task_loss(task, &w))?;
        let scaled = lift(seed, task_loss(&task.scaled(3.0), &w))?;
        if (scaled - 9.0 * base).abs() > 1e-12 * scaled {
            return fail(seed, "task loss does not scale quadratically");
        }
        let x = lift(seed, offline_oracle(&seq.tasks))?;
        let (a, y) = lift(seed, stack_offline(&seq.tasks))?;
        let r = lift(seed, a.mul_vec(&x))?.sub(&y).norm();
        if r > 1e-9 * y.norm() {
            return fail(seed, format!("offline oracle residual {r:.3e}"));
        }
    }
    Ok("forgetting mean, loss scaling and oracle residual hold".into())
}

fn check_operator_structure() -> Outcome {
    let part = standard_partition();
    for seed in 0..10u64 {
        let task = standard_task(10, seed);
        let op = lift(seed, build_operator(&task, &part))?;
        let a_abar = lift(seed, matmul(task.features(), &op.abar))?;
        if fro(&a_abar, &DenseMatrix::identity(10)) > 1e-9 {
            return fail(seed, "A Ā differs from the identity");
        }
        let p2 = lift(seed, matmul(&op.projection, &op.projection))?;
        if fro(&p2, &op.projection) > 1e-9 * op.projection.frobenius_norm() {
            return fail(seed, "P is not idempotent");
        }
        let blocks: Vec<_> = (0..4).map(|k| column_block(&task, &part, k)).collect::<Result<_>>().map_err(|e| (Some(seed), e.to_string()))?;
        if blocks.iter().any(|b| pinv_with_rank(b).map(|(_, r)| r != 10).unwrap_or(true)) {
            return fail(seed, "Gaussian block is rank deficient");
        }
    }
    Ok("A Ā = I and P² = P".into())
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

/// Runs every check with default options.
pub fn selfcheck() -> SelfcheckReport {
    selfcheck_with(&SelfcheckOptions::default())
}

pub fn selfcheck_with(opts: &SelfcheckOptions) -> SelfcheckReport {
    let checks: Vec<Check> = vec![
        ("pinv_penrose", Box::new(check_penrose)),
        ("pinv_broad_right_inverse", Box::new(check_broad_right_inverse)),
        ("min_norm_vs_pinv", Box::new(check_min_norm_vs_pinv)),
        ("task_generation", Box::new(check_tasks)),
        ("operator_structure", Box::new(check_operator_structure)),
        ("one_step_convergence", Box::new(check_one_step_convergence)),
        ("path_equivalence", Box::new(move || check_path_equivalence(opts))),
        ("network_bitwise", Box::new(move || check_network_bitwise(opts))),
        ("single_node_exact", Box::new(check_single_node_exact)),
        ("underparameterized", Box::new(check_underparameterized)),
        ("continual_properties", Box::new(check_continual_properties)),
        ("metrics", Box::new(check_metrics)),
    ];
    let checks = checks
        .into_iter()
        .map(|(name, run)| {
            let start = Instant::now();
            let outcome = run();
            let seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => CheckResult {
                    name,
                    passed: true,
                    detail,
                    seed: None,
                    seconds,
                },
                Err((seed, detail)) => CheckResult {
                    name,
                    passed: false,
                    detail,
                    seed,
                    seconds,
                },
            }
        })
        .collect();
    SelfcheckReport { checks }
}
