//! In-process simulation of the CoCoA network.
//!
//! Each [`NodeHandle`] owns one column block of the task and its slice of
//! the estimate. A round is a synchronous exchange through mailboxes:
//!
//! 1. every node posts a gather message carrying `v_k` to the coordinator;
//! 2. the coordinator waits for all `K` shares, averages them in ascending
//!    node order and posts `v̄` back to every node;
//! 3. each node applies its local step.
//!
//! That is `2K` messages per round. Node work in step 3 can be spread over
//! threads; the result does not depend on scheduling because aggregation
//! order is fixed at the coordinator.

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;

use crate::cocoa::{aggregate, local_share, local_step_with_pinv, TaskBlocks};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::tasks::{Partitioning, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Scatter,
    Gather,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub direction: Direction,
    /// Sender for gather messages, recipient for scatter messages.
    pub node: usize,
    pub round: usize,
    pub payload: DenseVector,
}

/// Order in which the coordinator sums the gathered shares.
///
/// Only `Ascending` reproduces the monolithic solver bit for bit;
/// `Descending` exists to check that the equivalence tests can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AggregationOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug)]
pub struct NodeHandle {
    pub node_id: usize,
    pub block: Range<usize>,
    pub local_features: DenseMatrix,
    local_pinv: DenseMatrix,
    targets: DenseVector,
    pub local_x: DenseVector,
    pub local_v: DenseVector,
    inbox: VecDeque<RoundMessage>,
    silent: bool,
    last_step_norm: f64,
}

impl NodeHandle {
    fn gather_message(&self, round: usize) -> Option<RoundMessage> {
        (!self.silent).then(|| RoundMessage {
            direction: Direction::Gather,
            node: self.node_id,
            round,
            payload: self.local_v.clone(),
        })
    }

    fn handle_scatter(&mut self, nodes: usize, round: usize) -> Result<()> {
        let msg = self.inbox.pop_front().ok_or_else(|| Error::Protocol {
            round,
            reason: format!("node {} has no scatter message", self.node_id),
        })?;
        if msg.direction != Direction::Scatter || msg.round != round {
            return Err(Error::Protocol {
                round,
                reason: format!("node {} received {:?} for round {}", self.node_id, msg.direction, msg.round),
            });
        }
        let v_bar = msg.payload;
        let residual = self.targets.sub(&v_bar);
        let dx = local_step_with_pinv(&self.local_pinv, residual.as_slice(), nodes);
        self.local_x.axpy(1.0, &dx);
        self.local_v = local_share(&self.local_features, v_bar.as_slice(), &dx, nodes);
        self.last_step_norm = dx.norm();
        Ok(())
    }

    pub fn last_step_norm(&self) -> f64 {
        self.last_step_norm
    }
}

#[derive(Debug)]
pub struct Coordinator {
    nodes: usize,
    round: usize,
    inbox: VecDeque<RoundMessage>,
    targets: DenseVector,
    order: AggregationOrder,
    messages: usize,
}

impl Coordinator {
    pub fn round(&self) -> usize {
        self.round
    }

    /// Total messages exchanged so far, in both directions.
    pub fn messages(&self) -> usize {
        self.messages
    }

    fn collect_shares(&mut self) -> Result<Vec<DenseVector>> {
        let mut slots: Vec<Option<DenseVector>> = vec![None; self.nodes];
        while let Some(msg) = self.inbox.pop_front() {
            let bad = |reason: String| Error::Protocol {
                round: self.round,
                reason,
            };
            if msg.direction != Direction::Gather || msg.round != self.round {
                return Err(bad(format!("unexpected {:?} message for round {}", msg.direction, msg.round)));
            }
            if msg.payload.len() != self.targets.len() {
                return Err(bad(format!(
                    "node {} sent {} entries, expected {}",
                    msg.node,
                    msg.payload.len(),
                    self.targets.len()
                )));
            }
            let slot = slots
                .get_mut(msg.node)
                .ok_or_else(|| bad(format!("unknown node {}", msg.node)))?;
            if slot.replace(msg.payload).is_some() {
                return Err(bad(format!("duplicate gather from node {}", msg.node)));
            }
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                s.ok_or_else(|| Error::Protocol {
                    round: self.round,
                    reason: format!("missing gather from node {k}"),
                })
            })
            .collect()
    }

    fn average(&self, shares: &[DenseVector]) -> DenseVector {
        let len = self.targets.len();
        match self.order {
            AggregationOrder::Ascending => aggregate(shares.iter(), self.nodes, len),
            AggregationOrder::Descending => aggregate(shares.iter().rev(), self.nodes, len),
        }
    }
}

/// Per-round diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// `‖v̄ − y‖` for the aggregate scattered this round.
    pub residual_norm: f64,
    pub step_norms: Vec<f64>,
}

pub struct Network {
    pub coordinator: Coordinator,
    pub nodes: Vec<NodeHandle>,
    parallel: bool,
    gather_schedule: Vec<usize>,
    trace: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("coordinator", &self.coordinator)
            .field("nodes", &self.nodes)
            .field("parallel", &self.parallel)
            .finish_non_exhaustive()
    }
}

/// Sets up one node per partition block, initialised at `w_init`, so that
/// the shares average to `A w_init`.
pub fn spawn_network(task: &Task, partition: &Partitioning, w_init: &DenseVector) -> Result<Network> {
    let blocks = TaskBlocks::new(task, partition)?;
    spawn_network_with_blocks(task, partition, &blocks, w_init)
}

pub fn spawn_network_with_blocks(
    task: &Task,
    partition: &Partitioning,
    blocks: &TaskBlocks,
    w_init: &DenseVector,
) -> Result<Network> {
    if w_init.len() != task.params() {
        return Err(Error::dims("spawn_network", task.params(), w_init.len()));
    }
    let k = partition.nodes();
    let zeros = vec![0.0; task.samples()];
    let nodes = partition
        .ranges()
        .enumerate()
        .map(|(node_id, block)| {
            let local_x = w_init.segment(block.clone());
            let local_v = local_share(blocks.block(node_id), &zeros, &local_x, k);
            NodeHandle {
                node_id,
                block,
                local_features: blocks.block(node_id).clone(),
                local_pinv: blocks.block_pinv(node_id).clone(),
                targets: task.targets().clone(),
                local_x,
                local_v,
                inbox: VecDeque::new(),
                silent: false,
                last_step_norm: 0.0,
            }
        })
        .collect();
    Ok(Network {
        coordinator: Coordinator {
            nodes: k,
            round: 0,
            inbox: VecDeque::new(),
            targets: task.targets().clone(),
            order: AggregationOrder::Ascending,
            messages: 0,
        },
        nodes,
        parallel: false,
        gather_schedule: (0..k).collect(),
        trace: None,
    })
}

impl Network {
    /// Run node-local work on the rayon pool.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn set_aggregation_order(&mut self, order: AggregationOrder) {
        self.coordinator.order = order;
    }

    /// Order in which nodes deliver their gather messages. Must be a
    /// permutation of `0..K`.
    pub fn set_gather_schedule(&mut self, schedule: Vec<usize>) {
        let mut sorted = schedule.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..self.nodes.len()).collect::<Vec<_>>(), "not a permutation");
        self.gather_schedule = schedule;
    }

    /// Silences node `k`: it stops sending gather messages.
    pub fn fail_node(&mut self, k: usize) {
        self.nodes[k].silent = true;
    }

    /// Writes one line per round: round index, `‖v̄ − y‖`, per-node step norms.
    pub fn set_trace(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    /// Concatenation of the local estimates.
    pub fn x(&self) -> DenseVector {
        DenseVector::concat(self.nodes.iter().map(|n| &n.local_x))
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.coordinator.round;
        let k = self.nodes.len();

        for &node in &self.gather_schedule {
            if let Some(msg) = self.nodes[node].gather_message(round) {
                self.coordinator.inbox.push_back(msg);
                self.coordinator.messages += 1;
            }
        }

        // barrier: nothing is scattered until every share is in
        let shares = self.coordinator.collect_shares()?;
        let v_bar = self.coordinator.average(&shares);
        let residual_norm = self.coordinator.targets.sub(&v_bar).norm();
        for node in &mut self.nodes {
            node.inbox.push_back(RoundMessage {
                direction: Direction::Scatter,
                node: node.node_id,
                round,
                payload: v_bar.clone(),
            });
            self.coordinator.messages += 1;
        }

        if self.parallel {
            self.nodes
                .par_iter_mut()
                .try_for_each(|node| node.handle_scatter(k, round))?;
        } else {
            for node in &mut self.nodes {
                node.handle_scatter(k, round)?;
            }
        }
        self.coordinator.round += 1;

        let report = RoundReport {
            round,
            residual_norm,
            step_norms: self.nodes.iter().map(NodeHandle::last_step_norm).collect(),
        };
        if let Some(sink) = self.trace.as_mut() {
            let steps: Vec<String> = report.step_norms.iter().map(|s| format!("{s:e}")).collect();
            writeln!(sink, "{} {:e} {}", report.round, report.residual_norm, steps.join(" "))?;
        }
        Ok(report)
    }
}

/// Runs `rounds` synchronous rounds from `w_init` and returns the assembled estimate.
pub fn run_network(task: &Task, partition: &Partitioning, w_init: &DenseVector, rounds: usize) -> Result<DenseVector> {
    let mut net = spawn_network(task, partition, w_init)?;
    for _ in 0..rounds {
        net.run_round()?;
    }
    Ok(net.x())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocoa::{inner_iteration, run_cocoa, CocoaConfig, CocoaState};
    use crate::tasks::{gen_gaussian_task, make_partition};
    use std::sync::{Arc, Mutex};

    fn setup(n: usize, sizes: &[usize], seed: u64) -> (Task, Partitioning, DenseVector) {
        let p = sizes.iter().sum();
        let part = make_partition(p, sizes).unwrap();
        let task = gen_gaussian_task(1, n, p, &DenseVector::ones(p), seed).unwrap();
        let w = DenseVector::new(
            gen_gaussian_task(2, 1, p, &DenseVector::zeros(p), seed).unwrap().features().row(0).to_vec(),
        )
        .unwrap();
        (task, part, w)
    }

    #[test]
    fn spawn_layout() {
        let (task, _, w) = setup(3, &[6], 1);
        let net = spawn_network(&task, &Partitioning::single(6).unwrap(), &w).unwrap();
        assert_eq!(net.nodes.len(), 1);
        assert_eq!(net.nodes[0].local_features, *task.features());

        let (task, part, w) = setup(10, &[16, 32, 48, 64], 2);
        let net = spawn_network(&task, &part, &w).unwrap();
        assert_eq!(net.nodes.iter().map(|n| n.local_x.len()).sum::<usize>(), 160);
        assert_eq!(net.x(), w);
        let shares: Vec<_> = net.nodes.iter().map(|n| n.local_v.clone()).collect();
        let mean = aggregate(shares.iter(), 4, 10);
        let aw = task.features().mul_vec(&w).unwrap();
        assert!(mean.sub(&aw).max_abs() <= 1e-12 * aw.max_abs().max(1.0));
    }

    #[test]
    fn two_k_messages_per_round() {
        let (task, part, w) = setup(10, &[16, 32, 48, 64], 3);
        let mut net = spawn_network(&task, &part, &w).unwrap();
        for r in 1..=3 {
            net.run_round().unwrap();
            assert_eq!(net.coordinator.messages(), 2 * 4 * r);
        }
    }

    #[test]
    fn round_matches_inner_iteration_bitwise() {
        for (n, sizes) in [(10, vec![16, 32, 48, 64]), (12, vec![3, 5]), (5, vec![5])] {
            let (task, part, w) = setup(n, &sizes, 4);
            let mut state = CocoaState::warm_start(&w, &task, &part).unwrap();
            let mut net = spawn_network(&task, &part, &w).unwrap();
            for _ in 0..20 {
                state = inner_iteration(&state, &task, &part).unwrap();
                net.run_round().unwrap();
                assert_eq!(net.x().as_slice(), state.x.as_slice());
                for (node, v) in net.nodes.iter().zip(&state.v) {
                    assert_eq!(node.local_v.as_slice(), v.as_slice());
                }
            }
        }
    }

    #[test]
    fn result_independent_of_scheduling() {
        let (task, part, w) = setup(40, &[7, 9, 4, 12], 5);
        let reference = run_cocoa(&task, &part, &w, &CocoaConfig { stop_tol: 0.0, ..CocoaConfig::iterative(50) }).unwrap();
        let mut net = spawn_network(&task, &part, &w).unwrap();
        net.set_parallel(true);
        net.set_gather_schedule(vec![2, 0, 3, 1]);
        for _ in 0..50 {
            net.run_round().unwrap();
        }
        assert_eq!(net.x().as_slice(), reference.as_slice());
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let (task, part, _) = setup(10, &[16, 32, 48, 64], 6);
        let mut net = spawn_network(&task, &part, &DenseVector::ones(160)).unwrap();
        let before = net.x();
        let report = net.run_round().unwrap();
        assert!(report.step_norms.iter().all(|&s| s <= 1e-13));
        assert!(net.x().sub(&before).max_abs() <= 1e-13);
    }

    #[test]
    fn missing_gather_is_a_protocol_error() {
        let (task, part, w) = setup(4, &[4, 4], 7);
        let mut net = spawn_network(&task, &part, &w).unwrap();
        net.run_round().unwrap();
        net.fail_node(1);
        let err = net.run_round().unwrap_err();
        assert!(matches!(err, Error::Protocol { round: 1, .. }), "{err}");
        assert!(err.to_string().contains("node 1"));
    }

    #[test]
    fn reversed_aggregation_breaks_bitwise_equivalence() {
        let (task, part, w) = setup(40, &[7, 9, 4, 12], 8);
        let reference = run_cocoa(&task, &part, &w, &CocoaConfig { stop_tol: 0.0, ..CocoaConfig::iterative(200) }).unwrap();
        let mut net = spawn_network(&task, &part, &w).unwrap();
        net.set_aggregation_order(AggregationOrder::Descending);
        for _ in 0..200 {
            net.run_round().unwrap();
        }
        assert_ne!(net.x().as_slice(), reference.as_slice());
    }

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn trace_has_one_line_per_round() {
        let (task, part, w) = setup(6, &[4, 4], 9);
        let buf = SharedBuf::default();
        let mut net = spawn_network(&task, &part, &w).unwrap();
        net.set_trace(Box::new(buf.clone()));
        for _ in 0..3 {
            net.run_round().unwrap();
        }
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2 "));
        assert_eq!(lines[0].split(' ').count(), 4);
    }
}
