//! Grid sweeps over `(n_m, M, seed)`.
//!
//! Every job is independent and runs on the rayon pool; results are put
//! back into grid order (n_m, then M, then seed) before anything is written,
//! so the output files do not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{ExperimentConfig, GeneratorKind, ScheduleKind};
use super::output;
use crate::cocoa::{CocoaConfig, SolverMode, DEFAULT_STOP_TOL};
use crate::continual::{default_eval_stride, run_continual, ContinualConfig, RunTrace};
use crate::error::Result;
use crate::tasks::build_sequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Diverged,
    Skipped,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Skipped => "skipped",
        }
    }
}

/// One line of `summary.csv`. Skipped cells get a single row with no seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRow {
    pub n_m: usize,
    pub tasks: usize,
    pub seed: Option<u64>,
    pub final_forgetting: f64,
    pub final_rel_step: f64,
    pub final_dist: f64,
    pub diverged: bool,
    pub status: CellStatus,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub n_m: usize,
    pub tasks: usize,
    pub status: CellStatus,
    pub seeds: usize,
    pub diverged_seeds: usize,
    pub median_forgetting: f64,
    pub median_rel_step: f64,
    pub median_dist: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SeedRow>,
    pub cells: Vec<CellSummary>,
    pub files: Vec<PathBuf>,
}

/// Median ignoring NaN; `inf` counts as a value.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            if a == b { a } else { b }
        } else {
            0.5 * (a + b)
        }
    }
}

pub fn cell_eval_stride(cfg: &ExperimentConfig, unique_tasks: usize) -> usize {
    if cfg.eval_stride == 0 {
        default_eval_stride(unique_tasks)
    } else {
        cfg.eval_stride
    }
}

/// Why a cell is not run, if it is not. Tasks with `n_m >= min p_k` have a
/// block that is not broad with full row rank, so the exact per-task solve
/// does not hold.
pub fn skip_reason(cfg: &ExperimentConfig, n_m: usize) -> Option<String> {
    let min_block = cfg.partition.iter().copied().min().unwrap_or(0);
    if n_m >= min_block && !cfg.force_iterative {
        Some(format!("n_m={n_m} >= min block {min_block}"))
    } else {
        None
    }
}

fn cocoa_config(cfg: &ExperimentConfig, n_m: usize) -> CocoaConfig {
    let min_block = cfg.partition.iter().copied().min().unwrap_or(0);
    let mode = if n_m >= min_block {
        SolverMode::Iterative
    } else {
        cfg.mode.into()
    };
    CocoaConfig {
        inner_iterations: cfg.inner_iterations,
        mode,
        stop_tol: DEFAULT_STOP_TOL,
    }
}

/// Runs one `(n_m, M, seed)` job and returns its full trace.
pub fn run_job(cfg: &ExperimentConfig, n_m: usize, unique_tasks: usize, seed: u64) -> Result<RunTrace> {
    let partition = cfg.partitioning()?;
    let generator = cfg.generator_spec();
    let schedule = cfg.schedule_for(unique_tasks);
    let seq = build_sequence(&schedule, &generator, n_m, cfg.p, seed)?;
    let continual = ContinualConfig::new(cocoa_config(cfg, n_m), cell_eval_stride(cfg, unique_tasks));
    run_continual(&seq, &partition, generator.reference(), &continual)
}

fn seed_row(n_m: usize, tasks: usize, seed: u64, trace: &RunTrace) -> SeedRow {
    let (f, r, d) = trace
        .last()
        .map(|m| (m.forgetting, m.rel_step, m.dist_to_gen))
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let diverged = trace.diverged();
    SeedRow {
        n_m,
        tasks,
        seed: Some(seed),
        final_forgetting: f,
        final_rel_step: r,
        final_dist: d,
        diverged,
        status: if diverged { CellStatus::Diverged } else { CellStatus::Ok },
        steps: trace.steps,
    }
}

fn summarize(n_m: usize, tasks: usize, rows: &[SeedRow], reason: Option<String>) -> CellSummary {
    if let Some(reason) = reason {
        return CellSummary {
            n_m,
            tasks,
            status: CellStatus::Skipped,
            seeds: 0,
            diverged_seeds: 0,
            median_forgetting: f64::NAN,
            median_rel_step: f64::NAN,
            median_dist: f64::NAN,
            reason,
        };
    }
    let col = |f: fn(&SeedRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let diverged_seeds = rows.iter().filter(|r| r.diverged).count();
    CellSummary {
        n_m,
        tasks,
        status: if diverged_seeds > 0 { CellStatus::Diverged } else { CellStatus::Ok },
        seeds: rows.len(),
        diverged_seeds,
        median_forgetting: col(|r| r.final_forgetting),
        median_rel_step: col(|r| r.final_rel_step),
        median_dist: col(|r| r.final_dist),
        reason: String::new(),
    }
}

fn meta(cfg: &ExperimentConfig) -> String {
    let schedule = match cfg.schedule {
        ScheduleKind::OneShot => "one_shot".to_string(),
        ScheduleKind::Cyclic => format!("cyclic repeats={}", cfg.repeats),
    };
    let stride = if cfg.eval_stride == 0 {
        "auto(whole cycles nearest 1000 steps)".to_string()
    } else {
        cfg.eval_stride.to_string()
    };
    let generator = match cfg.generator {
        GeneratorKind::Shared => "shared",
        GeneratorKind::Alternating => "alternating",
    };
    format!(
        "name={} p={} partition={:?} schedule={} generator={} inner_iterations={} eval_stride={}",
        cfg.name, cfg.p, cfg.partition, schedule, generator, cfg.inner_iterations, stride
    )
}

/// A finished job keyed by `(n_m, M, seed)`.
pub type JobTrace = ((usize, usize, u64), RunTrace);

/// Runs the whole grid without touching the filesystem.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<(Vec<SeedRow>, Vec<CellSummary>, Vec<JobTrace>)> {
    cfg.validate()?;
    let seeds = cfg.seeds.values();
    let jobs: Vec<(usize, usize, u64)> = cfg
        .n_m
        .iter()
        .flat_map(|&n| cfg.tasks.iter().map(move |&m| (n, m)))
        .filter(|&(n, _)| skip_reason(cfg, n).is_none())
        .flat_map(|(n, m)| seeds.iter().map(move |&s| (n, m, s)))
        .collect();
    let traces: Vec<JobTrace> = jobs
        .par_iter()
        .map(|&(n, m, s)| run_job(cfg, n, m, s).map(|t| ((n, m, s), t)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &n in &cfg.n_m {
        for &m in &cfg.tasks {
            let reason = skip_reason(cfg, n);
            let cell_rows: Vec<SeedRow> = traces
                .iter()
                .filter(|((jn, jm, _), _)| *jn == n && *jm == m)
                .map(|((_, _, s), t)| seed_row(n, m, *s, t))
                .collect();
            let summary = summarize(n, m, &cell_rows, reason);
            if summary.status == CellStatus::Skipped {
                rows.push(SeedRow {
                    n_m: n,
                    tasks: m,
                    seed: None,
                    final_forgetting: f64::NAN,
                    final_rel_step: f64::NAN,
                    final_dist: f64::NAN,
                    diverged: false,
                    status: CellStatus::Skipped,
                    steps: 0,
                });
            } else {
                rows.extend(cell_rows);
            }
            cells.push(summary);
        }
    }
    Ok((rows, cells, traces))
}

/// Runs the grid and writes `summary.csv`, `cells.csv`, optional traces
/// and optional heatmaps under `cfg.out`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (rows, cells, traces) = run_grid(cfg)?;
    write_outputs(cfg, &rows, &cells, &traces)
}

fn write_outputs(
    cfg: &ExperimentConfig,
    rows: &[SeedRow],
    cells: &[CellSummary],
    traces: &[JobTrace],
) -> Result<SweepResult> {
    let out: &Path = &cfg.out;
    fs::create_dir_all(out)?;
    let meta = meta(cfg);
    let mut files = Vec::new();

    let summary = out.join("summary.csv");
    output::write_summary_csv(&summary, rows, &meta)?;
    files.push(summary);
    let cells_path = out.join("cells.csv");
    output::write_cells_csv(&cells_path, cells, &meta)?;
    files.push(cells_path);

    if cfg.write_traces {
        let dir = out.join("traces");
        fs::create_dir_all(&dir)?;
        for ((n, m, s), trace) in traces {
            let path = dir.join(format!("trace_n{n}_M{m}_seed{s}.csv"));
            output::write_trace_csv(&path, trace, &format!("{meta} n_m={n} M={m} seed={s}"))?;
            files.push(path);
        }
    }

    if cfg.svg {
        type Metric = fn(&CellSummary) -> f64;
        let maps: [(&str, Metric); 2] = [
            ("forgetting", |c| c.median_forgetting),
            ("rel_step", |c| c.median_rel_step),
        ];
        for (label, value) in maps {
            let path = out.join(format!("heatmap_{label}.svg"));
            let title = format!("{}: median final {label} (log10)", cfg.name);
            fs::write(&path, output::heatmap_svg(cells, value, &title))?;
            files.push(path);
        }
    }

    Ok(SweepResult {
        rows: rows.to_vec(),
        cells: cells.to_vec(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::{ModeName, Seeds};

    fn small(out: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            name: "small".into(),
            p: 12,
            partition: vec![4, 8],
            schedule: ScheduleKind::Cyclic,
            repeats: 3,
            generator: GeneratorKind::Shared,
            n_m: vec![1, 2, 4],
            tasks: vec![2, 3],
            seeds: Seeds::Count(2),
            inner_iterations: 1,
            eval_stride: 0,
            mode: ModeName::Auto,
            force_iterative: false,
            write_traces: false,
            svg: false,
            out,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY]), f64::INFINITY);
        assert!(median(&[f64::NAN]).is_nan());
    }

    #[test]
    fn grid_order_and_skips() {
        let cfg = small(PathBuf::from("unused"));
        let (rows, cells, _) = run_grid(&cfg).unwrap();
        let keys: Vec<(usize, usize)> = cells.iter().map(|c| (c.n_m, c.tasks)).collect();
        assert_eq!(keys, vec![(1, 2), (1, 3), (2, 2), (2, 3), (4, 2), (4, 3)]);
        assert!(cells[4].status == CellStatus::Skipped && cells[5].status == CellStatus::Skipped);
        assert!(cells[..4].iter().all(|c| c.status == CellStatus::Ok && c.seeds == 2));
        assert_eq!(rows.len(), 4 * 2 + 2);
        assert!(cells[0].median_forgetting.is_finite());
    }

    #[test]
    fn force_iterative_runs_wide_cells() {
        let mut cfg = small(PathBuf::from("unused"));
        cfg.force_iterative = true;
        cfg.inner_iterations = 5;
        let (_, cells, _) = run_grid(&cfg).unwrap();
        assert!(cells.iter().all(|c| c.status != CellStatus::Skipped));
    }
}
