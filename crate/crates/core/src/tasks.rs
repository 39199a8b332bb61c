//! Tasks, column partitioning over nodes, task schedules and the stacked
//! offline problem.
//!
//! Task ids are 1-based (`1..=M`) because the alternating generator family
//! assigns generators by the parity of the id. Node indices are 0-based.
//!
//! # Random streams
//!
//! Every task draws from its own generator seeded with
//! [`task_seed`]`(master_seed, id)`, so adding tasks never perturbs the data
//! of earlier ones. The generator is ChaCha12 (`rand_chacha::ChaCha12Rng`,
//! seeded through `SeedableRng::seed_from_u64`) and normal variates come from
//! the ziggurat sampler `rand_distr::StandardNormal`. Entries are drawn in
//! row-major order. Streams are reproducible within this repository only.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    id: usize,
    features: DenseMatrix,
    targets: DenseVector,
}

impl Task {
    pub fn new(id: usize, features: DenseMatrix, targets: DenseVector) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::dims("Task::new", features.rows(), targets.len()));
        }
        Ok(Self {
            id,
            features,
            targets,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn targets(&self) -> &DenseVector {
        &self.targets
    }

    /// Number of samples `n_m`.
    pub fn samples(&self) -> usize {
        self.features.rows()
    }

    /// Number of parameters `p`.
    pub fn params(&self) -> usize {
        self.features.cols()
    }

    /// Returns a copy with features and targets multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Task {
        Task {
            id: self.id,
            features: self.features.scaled(factor),
            targets: self.targets.scaled(factor),
        }
    }
}

/// Contiguous column blocks, one per node, in ascending node order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partitioning {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

pub fn make_partition(p: usize, sizes: &[usize]) -> Result<Partitioning> {
    if sizes.is_empty() {
        return Err(Error::InvalidPartition("no blocks given".into()));
    }
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidPartition(format!("block {k} is empty")));
    }
    let total: usize = sizes.iter().sum();
    if total != p {
        return Err(Error::InvalidPartition(format!(
            "block sizes sum to {total}, expected p = {p}"
        )));
    }
    let offsets = sizes
        .iter()
        .scan(0, |acc, &s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect();
    Ok(Partitioning {
        sizes: sizes.to_vec(),
        offsets,
    })
}

impl Partitioning {
    /// A single node owning all `p` columns.
    pub fn single(p: usize) -> Result<Self> {
        make_partition(p, &[p])
    }

    /// `nodes` blocks as equal as possible, larger blocks first.
    pub fn even(p: usize, nodes: usize) -> Result<Self> {
        if nodes == 0 || nodes > p {
            return Err(Error::InvalidPartition(format!(
                "cannot split {p} columns over {nodes} nodes"
            )));
        }
        let sizes: Vec<usize> = (0..nodes)
            .map(|k| p / nodes + usize::from(k < p % nodes))
            .collect();
        make_partition(p, &sizes)
    }

    pub fn nodes(&self) -> usize {
        self.sizes.len()
    }

    pub fn params(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn min_block(&self) -> usize {
        self.sizes.iter().copied().min().unwrap_or(0)
    }

    /// Column range owned by node `k` (0-based).
    pub fn range(&self, k: usize) -> Result<Range<usize>> {
        if k >= self.nodes() {
            return Err(Error::NodeOutOfRange {
                k,
                nodes: self.nodes(),
            });
        }
        Ok(self.offsets[k]..self.offsets[k] + self.sizes[k])
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.iter().zip(&self.sizes).map(|(&o, &s)| o..o + s)
    }
}

/// The `n_m × p_k` block of the task's features owned by node `k`.
pub fn column_block(task: &Task, partition: &Partitioning, k: usize) -> Result<DenseMatrix> {
    if task.params() != partition.params() {
        return Err(Error::dims("column_block", partition.params(), task.params()));
    }
    task.features.columns(partition.range(k)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    OneShot,
    Cyclic { repeats: usize },
}

/// Order in which the `M` unique tasks are presented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    pub mode: ScheduleMode,
    pub unique_tasks: usize,
}

impl TaskSchedule {
    pub fn one_shot(unique_tasks: usize) -> Self {
        Self {
            mode: ScheduleMode::OneShot,
            unique_tasks,
        }
    }

    pub fn cyclic(unique_tasks: usize, repeats: usize) -> Self {
        Self {
            mode: ScheduleMode::Cyclic { repeats },
            unique_tasks,
        }
    }

    /// Total number of outer steps `T`.
    pub fn len(&self) -> usize {
        match self.mode {
            ScheduleMode::OneShot => self.unique_tasks,
            ScheduleMode::Cyclic { repeats } => repeats * self.unique_tasks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Task id presented at outer step `t` (both 1-based).
    pub fn task_at(&self, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.len());
        match self.mode {
            ScheduleMode::OneShot => t,
            ScheduleMode::Cyclic { .. } => (t - 1) % self.unique_tasks + 1,
        }
    }

    pub fn sequence(&self) -> Vec<usize> {
        (1..=self.len()).map(|t| self.task_at(t)).collect()
    }
}

/// How task targets are generated from the features.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorSpec {
    /// Every task is `y_m = A_m w★`.
    Shared(DenseVector),
    /// Even task ids use `even`, odd ids use `odd`.
    Alternating { even: DenseVector, odd: DenseVector },
}

impl GeneratorSpec {
    /// `w★ = 1_p`.
    pub fn shared_ones(p: usize) -> Self {
        GeneratorSpec::Shared(DenseVector::ones(p))
    }

    /// `w_even = 1_p` and `w_odd` equal to ones with the last `⌊p/10⌋` entries zeroed.
    pub fn alternating_default(p: usize) -> Self {
        let zeros = p / 10;
        let odd = (0..p).map(|i| if i < p - zeros { 1.0 } else { 0.0 }).collect();
        GeneratorSpec::Alternating {
            even: DenseVector::ones(p),
            odd: DenseVector::from_vec_unchecked(odd),
        }
    }

    pub fn params(&self) -> usize {
        match self {
            GeneratorSpec::Shared(w) => w.len(),
            GeneratorSpec::Alternating { even, .. } => even.len(),
        }
    }

    pub fn for_task(&self, id: usize) -> &DenseVector {
        match self {
            GeneratorSpec::Shared(w) => w,
            GeneratorSpec::Alternating { even, odd } => {
                if id.is_multiple_of(2) {
                    even
                } else {
                    odd
                }
            }
        }
    }

    /// Vector that distances are reported against: `w★`, or `w_even` for
    /// the alternating family.
    pub fn reference(&self) -> &DenseVector {
        match self {
            GeneratorSpec::Shared(w) => w,
            GeneratorSpec::Alternating { even, .. } => even,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-task seed: `splitmix64(splitmix64(master_seed) ^ id)`.
pub fn task_seed(master_seed: u64, id: usize) -> u64 {
    splitmix64(splitmix64(master_seed) ^ id as u64)
}

/// Gaussian features with targets `features × generator`.
pub fn gen_gaussian_task(
    id: usize,
    samples: usize,
    params: usize,
    generator: &DenseVector,
    master_seed: u64,
) -> Result<Task> {
    if samples == 0 || params == 0 {
        return Err(Error::dims(
            "gen_gaussian_task",
            "n_m >= 1 and p >= 1",
            format!("n_m = {samples}, p = {params}"),
        ));
    }
    if generator.len() != params {
        return Err(Error::dims("gen_gaussian_task", params, generator.len()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(task_seed(master_seed, id));
    let data: Vec<f64> = (0..samples * params)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let features = DenseMatrix::from_vec_unchecked(samples, params, data);
    let targets = features.mul_vec(generator)?;
    Task::new(id, features, targets)
}

/// The unique tasks of a run and the presentation order over them.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    /// Unique tasks, `tasks[m - 1].id() == m`.
    pub tasks: Vec<Task>,
    /// Task id presented at each outer step.
    pub order: Vec<usize>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Task>, order: Vec<usize>) -> Result<Self> {
        for (i, task) in tasks.iter().enumerate() {
            if task.id() != i + 1 {
                return Err(Error::dims("TaskSequence::new", i + 1, task.id()));
            }
        }
        if let Some(&bad) = order.iter().find(|&&id| id == 0 || id > tasks.len()) {
            return Err(Error::dims(
                "TaskSequence::new",
                format!("task id in 1..={}", tasks.len()),
                bad,
            ));
        }
        Ok(Self { tasks, order })
    }

    pub fn task(&self, id: usize) -> &Task {
        &self.tasks[id - 1]
    }

    /// Task presented at outer step `t` (1-based).
    pub fn task_at(&self, t: usize) -> &Task {
        self.task(self.order[t - 1])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Generates the `M` unique tasks once and the schedule's order over them.
pub fn build_sequence(
    schedule: &TaskSchedule,
    generator: &GeneratorSpec,
    samples: usize,
    params: usize,
    master_seed: u64,
) -> Result<TaskSequence> {
    if generator.params() != params {
        return Err(Error::dims("build_sequence", params, generator.params()));
    }
    let tasks = (1..=schedule.unique_tasks)
        .into_par_iter()
        .map(|id| gen_gaussian_task(id, samples, params, generator.for_task(id), master_seed))
        .collect::<Result<Vec<_>>>()?;
    TaskSequence::new(tasks, schedule.sequence())
}

/// Row-stacks all tasks into the offline system `(A_S, y_S)`.
pub fn stack_offline(tasks: &[Task]) -> Result<(DenseMatrix, DenseVector)> {
    let p = tasks.first().map_or(0, Task::params);
    if let Some(bad) = tasks.iter().find(|t| t.params() != p) {
        return Err(Error::dims("stack_offline", format!("p = {p}"), bad.params()));
    }
    let features: Vec<DenseMatrix> = tasks.iter().map(|t| t.features.clone()).collect();
    let a = DenseMatrix::vstack(&features)?;
    let y = DenseVector::concat(tasks.iter().map(|t| &t.targets));
    Ok((a, y))
}

/// Writes a task as CSV: a first record `n,p`, then one record per sample
/// holding the feature row followed by the target.
pub fn write_task_csv<W: Write>(task: &Task, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    w.write_record([task.samples().to_string(), task.params().to_string()])?;
    for i in 0..task.samples() {
        let row = task.features.row(i).iter().chain(std::iter::once(&task.targets[i]));
        w.write_record(row.map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_task_csv<R: Read>(id: usize, reader: R) -> Result<Task> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = r.records();
    let bad = |reason: String| Error::config("task csv", reason);
    let header = records.next().ok_or_else(|| bad("empty file".into()))??;
    let parse_count = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad("header must be `n,p`".into()))
    };
    let n = parse_count(header.get(0))?;
    let p = parse_count(header.get(1))?;
    let mut features = Vec::with_capacity(n * p);
    let mut targets = Vec::with_capacity(n);
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != p + 1 {
            return Err(bad(format!("row {i} has {} fields, expected {}", rec.len(), p + 1)));
        }
        let values = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {i}: {e}")))?;
        features.extend_from_slice(&values[..p]);
        targets.push(values[p]);
    }
    if targets.len() != n {
        return Err(bad(format!("expected {n} rows, found {}", targets.len())));
    }
    Task::new(id, DenseMatrix::new(n, p, features)?, DenseVector::new(targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_norm_solve;

    #[test]
    fn zero_generator_gives_zero_targets() {
        let t = gen_gaussian_task(1, 5, 12, &DenseVector::zeros(12), 3).unwrap();
        assert!(t.targets().iter().all(|&y| y == 0.0));
        assert!(t.features().as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn generation_is_deterministic_and_per_task() {
        let w = DenseVector::ones(20);
        let a = gen_gaussian_task(4, 3, 20, &w, 99).unwrap();
        let b = gen_gaussian_task(4, 3, 20, &w, 99).unwrap();
        assert_eq!(a, b);
        let other_id = gen_gaussian_task(5, 3, 20, &w, 99).unwrap();
        let other_seed = gen_gaussian_task(4, 3, 20, &w, 100).unwrap();
        assert_ne!(a.features(), other_id.features());
        assert_ne!(a.features(), other_seed.features());
    }

    #[test]
    fn changing_task_count_keeps_earlier_tasks() {
        let g = GeneratorSpec::shared_ones(16);
        let short = build_sequence(&TaskSchedule::one_shot(2), &g, 3, 16, 5).unwrap();
        let long = build_sequence(&TaskSchedule::one_shot(6), &g, 3, 16, 5).unwrap();
        assert_eq!(short.tasks[..], long.tasks[..2]);
    }

    #[test]
    fn generated_task_is_consistent() {
        let t = gen_gaussian_task(1, 10, 160, &DenseVector::ones(160), 1).unwrap();
        let x = min_norm_solve(t.features(), t.targets()).unwrap();
        let r = t.features().mul_vec(&x).unwrap().sub(t.targets());
        assert!(r.norm() <= 1e-10);
    }

    #[test]
    fn generation_rejects_bad_dimensions() {
        assert!(gen_gaussian_task(1, 0, 4, &DenseVector::ones(4), 0).is_err());
        assert!(gen_gaussian_task(1, 2, 4, &DenseVector::ones(5), 0).is_err());
    }

    #[test]
    fn partition_ranges() {
        let part = make_partition(160, &[16, 32, 48, 64]).unwrap();
        let ranges: Vec<_> = part.ranges().collect();
        assert_eq!(ranges, vec![0..16, 16..48, 48..96, 96..160]);
        assert_eq!(part.nodes(), 4);
        assert_eq!(part.min_block(), 16);

        let single = make_partition(4, &[4]).unwrap();
        assert_eq!(single.nodes(), 1);
        assert_eq!(single.range(0).unwrap(), 0..4);

        let even = make_partition(8, &[4, 4]).unwrap();
        assert_eq!(even.ranges().collect::<Vec<_>>(), vec![0..4, 4..8]);
        assert_eq!(Partitioning::even(10, 3).unwrap().sizes(), &[4, 3, 3]);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(make_partition(10, &[4, 4]), Err(Error::InvalidPartition(_))));
        assert!(matches!(make_partition(4, &[4, 0]), Err(Error::InvalidPartition(_))));
        assert!(matches!(make_partition(0, &[]), Err(Error::InvalidPartition(_))));
        let part = make_partition(8, &[4, 4]).unwrap();
        assert!(matches!(part.range(2), Err(Error::NodeOutOfRange { k: 2, nodes: 2 })));
    }

    #[test]
    fn column_blocks() {
        let task = gen_gaussian_task(1, 3, 160, &DenseVector::ones(160), 2).unwrap();
        let whole = column_block(&task, &Partitioning::single(160).unwrap(), 0).unwrap();
        assert_eq!(&whole, task.features());

        let part = make_partition(160, &[16, 32, 48, 64]).unwrap();
        let blocks: Vec<_> = (0..4).map(|k| column_block(&task, &part, k).unwrap()).collect();
        assert_eq!(&DenseMatrix::hstack(&blocks).unwrap(), task.features());

        // second node owns columns 16..=47
        let b = &blocks[1];
        assert_eq!(b.cols(), 32);
        for i in 0..3 {
            assert_eq!(b.row(i), &task.features().row(i)[16..48]);
        }
        assert!(column_block(&task, &part, 4).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(TaskSchedule::one_shot(3).sequence(), vec![1, 2, 3]);
        assert_eq!(TaskSchedule::cyclic(2, 3).sequence(), vec![1, 2, 1, 2, 1, 2]);
        assert_eq!(TaskSchedule::cyclic(40, 1000).len(), 40_000);
    }

    #[test]
    fn cyclic_sequence_reuses_task_data() {
        let g = GeneratorSpec::shared_ones(8);
        let seq = build_sequence(&TaskSchedule::cyclic(2, 3), &g, 2, 8, 1).unwrap();
        assert_eq!(seq.tasks.len(), 2);
        assert_eq!(seq.order, vec![1, 2, 1, 2, 1, 2]);
        assert!(std::ptr::eq(seq.task_at(1), seq.task_at(5)));
    }

    #[test]
    fn alternating_generators_follow_parity() {
        let p = 160;
        let g = GeneratorSpec::alternating_default(p);
        let GeneratorSpec::Alternating { even, odd } = &g else {
            unreachable!()
        };
        assert_eq!(odd.iter().filter(|&&x| x == 1.0).count(), 144);
        assert!(odd.as_slice()[144..].iter().all(|&x| x == 0.0));

        let seq = build_sequence(&TaskSchedule::one_shot(4), &g, 2, p, 8).unwrap();
        for task in &seq.tasks {
            let expected = if task.id() % 2 == 0 { even } else { odd };
            let y = task.features().mul_vec(expected).unwrap();
            assert_eq!(&y, task.targets());
        }
        // p not divisible by 10 floors the zero block
        let GeneratorSpec::Alternating { odd, .. } = GeneratorSpec::alternating_default(25) else {
            unreachable!()
        };
        assert_eq!(odd.iter().filter(|&&x| x == 0.0).count(), 2);
    }

    #[test]
    fn shared_generator_satisfied_exactly() {
        let g = GeneratorSpec::shared_ones(30);
        let seq = build_sequence(&TaskSchedule::one_shot(5), &g, 4, 30, 77).unwrap();
        for task in &seq.tasks {
            let r = task.features().mul_vec(g.reference()).unwrap().sub(task.targets());
            assert!(r.norm() <= 1e-12 * task.targets().norm());
        }
    }

    #[test]
    fn stacking() {
        let g = GeneratorSpec::shared_ones(4);
        let seq = build_sequence(&TaskSchedule::one_shot(2), &g, 2, 4, 3).unwrap();
        let (a, y) = stack_offline(&seq.tasks[..1]).unwrap();
        assert_eq!(&a, seq.tasks[0].features());
        assert_eq!(&y, seq.tasks[0].targets());

        let (a, y) = stack_offline(&seq.tasks).unwrap();
        assert_eq!(a.shape(), (4, 4));
        assert_eq!(y.len(), 4);
        assert_eq!(a.row(2), seq.tasks[1].features().row(0));

        let other = gen_gaussian_task(3, 2, 5, &DenseVector::ones(5), 0).unwrap();
        assert!(stack_offline(&[seq.tasks[0].clone(), other]).is_err());
    }

    #[test]
    fn stacked_shared_family_is_consistent() {
        let g = GeneratorSpec::shared_ones(40);
        let seq = build_sequence(&TaskSchedule::one_shot(6), &g, 3, 40, 12).unwrap();
        let (a, y) = stack_offline(&seq.tasks).unwrap();
        let x = min_norm_solve(&a, &y).unwrap();
        assert!(a.mul_vec(&x).unwrap().sub(&y).norm() <= 1e-9 * y.norm());
    }

    #[test]
    fn task_csv_round_trip() {
        let task = gen_gaussian_task(3, 4, 6, &DenseVector::ones(6), 21).unwrap();
        let mut buf = Vec::new();
        write_task_csv(&task, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("4,6\n"));
        assert_eq!(read_task_csv(3, buf.as_slice()).unwrap(), task);
        assert!(read_task_csv(1, "2,3\n1,2,3,4\n".as_bytes()).is_err());
    }
}
