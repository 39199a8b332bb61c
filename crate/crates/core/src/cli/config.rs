//! Experiment configuration.
//!
//! Configs are flat TOML: one `key = value` per line, grids as arrays.
//!
//! ```toml
//! name = "fig3_4"
//! p = 160
//! partition = [16, 32, 48, 64]
//! schedule = "cyclic"          # or "one_shot"
//! repeats = 1000               # cycles, cyclic schedules only
//! generator = "shared"         # or "alternating"
//! n_m = [1, 2, 4, 8, 10]
//! tasks = [2, 4, 8, 16, 40, 80, 160]
//! seeds = 20                   # count (seeds 0..20) or explicit list [3, 7]
//! inner_iterations = 1         # T_c
//! eval_stride = 0              # 0 = whole cycles closest to 1000 steps
//! mode = "auto"                # auto | iterative | closed_form
//! force_iterative = false      # run n_m >= min p_k cells iteratively instead of skipping
//! write_traces = false
//! svg = false
//! out = "results/fig3_4"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::cocoa::SolverMode;
use crate::error::{Error, Result};
use crate::tasks::{make_partition, GeneratorSpec, Partitioning, TaskSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    OneShot,
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Shared,
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Auto,
    Iterative,
    ClosedForm,
}

impl From<ModeName> for SolverMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Auto => SolverMode::Auto,
            ModeName::Iterative => SolverMode::Iterative,
            ModeName::ClosedForm => SolverMode::ClosedForm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn values(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

fn default_repeats() -> usize {
    1
}

fn default_inner() -> usize {
    1
}

fn default_seeds() -> Seeds {
    Seeds::Count(20)
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub p: usize,
    pub partition: Vec<usize>,
    pub schedule: ScheduleKind,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub generator: GeneratorKind,
    pub n_m: Vec<usize>,
    pub tasks: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Seeds,
    #[serde(default = "default_inner")]
    pub inner_iterations: usize,
    #[serde(default)]
    pub eval_stride: usize,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub force_iterative: bool,
    #[serde(default)]
    pub write_traces: bool,
    #[serde(default)]
    pub svg: bool,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::config(error_field(text, &e), e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::config("p", "must be at least 1"));
        }
        make_partition(self.p, &self.partition).map_err(|e| Error::config("partition", e.to_string()))?;
        if self.schedule == ScheduleKind::Cyclic && self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.n_m.is_empty() || self.n_m.contains(&0) {
            return Err(Error::config("n_m", "needs at least one value, all >= 1"));
        }
        if self.tasks.is_empty() || self.tasks.contains(&0) {
            return Err(Error::config("tasks", "needs at least one value, all >= 1"));
        }
        if self.seeds.values().is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        if self.inner_iterations == 0 {
            return Err(Error::config("inner_iterations", "must be at least 1"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "must name a directory"));
        }
        Ok(())
    }

    pub fn partitioning(&self) -> Result<Partitioning> {
        make_partition(self.p, &self.partition)
    }

    pub fn schedule_for(&self, unique_tasks: usize) -> TaskSchedule {
        match self.schedule {
            ScheduleKind::OneShot => TaskSchedule::one_shot(unique_tasks),
            ScheduleKind::Cyclic => TaskSchedule::cyclic(unique_tasks, self.repeats),
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        match self.generator {
            GeneratorKind::Shared => GeneratorSpec::shared_ones(self.p),
            GeneratorKind::Alternating => GeneratorSpec::alternating_default(self.p),
        }
    }
}

/// Key a TOML error refers to: named in the message for missing or unknown
/// fields, otherwise the key on the line the error points at.
fn error_field(text: &str, err: &toml::de::Error) -> String {
    let msg = err.message();
    if msg.starts_with("missing field") || msg.starts_with("unknown field") {
        if let Some(name) = msg.split('`').nth(1) {
            return name.to_string();
        }
    }
    err.span()
        .and_then(|span| {
            let line_start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
            let line = text[line_start..].lines().next()?;
            line.split_once('=').map(|(key, _)| key.trim().to_string())
        })
        .unwrap_or_else(|| "<document>".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
        p = 160
        partition = [16, 32, 48, 64]
        schedule = "cyclic"
        repeats = 10
        generator = "shared"
        n_m = [1, 2]
        tasks = [2, 4]
        out = "results/x"
    "#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASIC).unwrap();
        assert_eq!(cfg.seeds.values().len(), 20);
        assert_eq!(cfg.inner_iterations, 1);
        assert_eq!(cfg.eval_stride, 0);
        assert_eq!(cfg.mode, ModeName::Auto);
        assert_eq!(cfg.schedule_for(3).len(), 30);
        assert!(!cfg.write_traces);
    }

    #[test]
    fn seed_list() {
        let cfg = ExperimentConfig::from_toml(&format!("{BASIC}\nseeds = [5, 9]")).unwrap();
        assert_eq!(cfg.seeds.values(), vec![5, 9]);
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(&BASIC.replace("[16, 32, 48, 64]", "[16, 32]")), "partition");
        assert_eq!(field_of(&BASIC.replace("n_m = [1, 2]", "n_m = []")), "n_m");
        assert_eq!(field_of(&BASIC.replace("repeats = 10", "repeats = 0")), "repeats");
        assert_eq!(field_of(&format!("{BASIC}\nbogus = 1")), "bogus");
        assert_eq!(field_of(&BASIC.replace("\"cyclic\"", "\"sometimes\"")), "schedule");
        assert_eq!(field_of(&BASIC.replace("out = \"results/x\"", "")), "out");
    }
}
