//! Named experiment presets.
//!
//! All presets use `p = 160` split over four nodes as `{16, 32, 48, 64}` and
//! `w★ = 1`. The `M` grids are powers of two plus 40, 80 and 160 so that the
//! `N = n_m · M = p` cells (1,160), (2,80) and (4,40) are always present.

use std::path::PathBuf;

use super::config::{ExperimentConfig, GeneratorKind, ModeName, ScheduleKind, Seeds};

pub const PRESET_NAMES: &[&str] = &["fig1_2", "fig3_4", "fig5", "fig6", "fig7"];

const TASK_GRID: &[usize] = &[2, 4, 8, 16, 32, 40, 64, 80, 128, 160];

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        p: 160,
        partition: vec![16, 32, 48, 64],
        schedule: ScheduleKind::Cyclic,
        repeats: 1000,
        generator: GeneratorKind::Shared,
        n_m: (1..=10).collect(),
        tasks: TASK_GRID.to_vec(),
        seeds: Seeds::Count(20),
        inner_iterations: 1,
        eval_stride: 0,
        mode: ModeName::Auto,
        force_iterative: false,
        write_traces: false,
        svg: true,
        out: PathBuf::from("results").join(name),
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = base(name);
    match name {
        // every task once: final step size and forgetting over (n_m, M)
        "fig1_2" => {
            cfg.schedule = ScheduleKind::OneShot;
            cfg.repeats = 1;
        }
        // each task 1000 times over the same grid
        "fig3_4" => {}
        // forgetting against t around the N = p streak, n_m = 2
        "fig5" => {
            cfg.n_m = vec![2];
            cfg.tasks = vec![10, 40, 70, 80, 90, 160];
            cfg.repeats = 2000;
            cfg.write_traces = true;
            cfg.svg = false;
        }
        // distance to w★ against M, n_m = 2
        "fig6" => {
            cfg.n_m = vec![2];
            cfg.tasks = vec![2, 5, 10, 20, 40, 60, 70, 80, 90, 100, 120, 160];
            cfg.svg = false;
        }
        // alternating generators, n_m = 2
        "fig7" => {
            cfg.generator = GeneratorKind::Alternating;
            cfg.n_m = vec![2];
            cfg.tasks = vec![2, 10, 150];
            cfg.write_traces = true;
            cfg.svg = false;
        }
        _ => return None,
    }
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, *name);
        }
        assert!(preset("fig9").is_none());
    }

    #[test]
    fn grids_cover_the_critical_streak() {
        let cfg = preset("fig3_4").unwrap();
        for (n, m) in [(1, 160), (2, 80), (4, 40)] {
            assert!(cfg.n_m.contains(&n) && cfg.tasks.contains(&m));
        }
        assert_eq!(preset("fig1_2").unwrap().schedule, ScheduleKind::OneShot);
        assert_eq!(preset("fig7").unwrap().tasks, vec![2, 10, 150]);
    }
}
