//! Energy functional, greedy ground-state heuristic and exact oracle.
//!
//! For spins `s` the energy is `e(s) = (1 - alpha * 1' S A_u S 1) / 2` with
//! `alpha = 1 / sum |A_u|`; the frustration index is its minimum over `s`.

mod heap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::{symmetrize, SignedSparseGraph, SymmetrizedView};
use heap::IndexedMinHeap;

pub const DEFAULT_BRUTE_FORCE_CAP: usize = 20;

/// Relative threshold below which a row sum counts as negative.
pub const NEGATIVE_ROWSUM_TOLERANCE: f64 = 1e-12;

/// A vector of `+1` / `-1` spins, one per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct SpinAssignment(Vec<i8>);

impl SpinAssignment {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(pos) = spins.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument(format!(
                "spin {pos} is {}, expected +1 or -1",
                spins[pos]
            )));
        }
        Ok(Self(spins))
    }

    pub fn all_up(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|&s| -s).collect())
    }
}

impl TryFrom<Vec<i8>> for SpinAssignment {
    type Error = Error;

    fn try_from(spins: Vec<i8>) -> Result<Self> {
        Self::new(spins)
    }
}

impl From<SpinAssignment> for Vec<i8> {
    fn from(s: SpinAssignment) -> Self {
        s.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundStateResult {
    pub epsilon_hat: f64,
    pub spins: SpinAssignment,
    pub flips_performed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_trace: Option<Vec<f64>>,
    pub replica_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub replica_count: usize,
    /// Number of random single-node gauge flips applied before descent.
    pub initial_flips: u64,
    pub max_iterations: u64,
    pub seed: u64,
    #[serde(default)]
    pub record_trace: bool,
    /// Alternate single-node descent with flips of whole satisfied-edge
    /// clusters until neither move lowers the energy.
    #[serde(default = "enabled")]
    pub cluster_moves: bool,
}

fn enabled() -> bool {
    true
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        Self {
            replica_count: 80,
            initial_flips: 1_000_000,
            max_iterations: 100_000_000,
            seed: 0,
            record_trace: false,
            cluster_moves: true,
        }
    }
}

impl ReplicaConfig {
    fn validate(&self) -> Result<()> {
        if self.replica_count == 0 {
            return Err(Error::InvalidArgument(
                "replica_count must be at least 1".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Results of all replicas in replica order, plus the index of the best one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOutcome {
    pub results: Vec<GroundStateResult>,
    pub best: usize,
}

impl ReplicaOutcome {
    pub fn best(&self) -> &GroundStateResult {
        &self.results[self.best]
    }

    pub fn best_epsilon(&self) -> f64 {
        self.best().epsilon_hat
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.epsilon_hat).collect()
    }
}

fn check_view(view: &SymmetrizedView, spins: &SpinAssignment) -> Result<()> {
    if view.total_abs() == 0.0 {
        return Err(Error::EmptyGraph);
    }
    if spins.len() != view.node_count() {
        return Err(Error::InvalidArgument(format!(
            "spin vector has length {}, graph has {} nodes",
            spins.len(),
            view.node_count()
        )));
    }
    Ok(())
}

fn aligned_weight(view: &SymmetrizedView, s: &[i8]) -> f64 {
    let row_ptr = view.row_ptr();
    let cols = view.cols();
    let weights = view.weights();
    let mut total = 0.0;
    for i in 0..view.node_count() {
        for k in row_ptr[i]..row_ptr[i + 1] {
            total += f64::from(s[i] * s[cols[k] as usize]) * weights[k];
        }
    }
    total
}

/// `e(s)`, evaluated from scratch. A fully aligned configuration yields
/// exactly zero.
pub fn energy(view: &SymmetrizedView, spins: &SpinAssignment) -> Result<f64> {
    check_view(view, spins)?;
    let aligned = aligned_weight(view, spins.as_slice());
    Ok((0.5 * (1.0 - aligned / view.total_abs())).clamp(0.0, 1.0))
}

/// Spins together with the row sums `rowsum = S A_u S 1`, updated in
/// `O(degree)` per flip.
#[derive(Clone, Debug)]
pub struct FlipState<'a> {
    view: &'a SymmetrizedView,
    spins: Vec<i8>,
    rowsum: Vec<f64>,
}

impl<'a> FlipState<'a> {
    pub fn new(view: &'a SymmetrizedView, spins: SpinAssignment) -> Result<Self> {
        if spins.len() != view.node_count() {
            return Err(Error::InvalidArgument(format!(
                "spin vector has length {}, graph has {} nodes",
                spins.len(),
                view.node_count()
            )));
        }
        let spins = spins.0;
        let rowsum = full_rowsums(view, &spins);
        Ok(Self {
            view,
            spins,
            rowsum,
        })
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn rowsums(&self) -> &[f64] {
        &self.rowsum
    }

    /// Row sums recomputed from scratch for the current spins.
    pub fn recomputed_rowsums(&self) -> Vec<f64> {
        full_rowsums(self.view, &self.spins)
    }

    /// Negates `s_i` and patches the row sums of `i` and its neighbours.
    pub fn flip(&mut self, i: usize) {
        let si = f64::from(self.spins[i]);
        for (j, w) in self.view.neighbors(i) {
            self.rowsum[j] -= 2.0 * f64::from(self.spins[j]) * w * si;
        }
        self.rowsum[i] = -self.rowsum[i];
        self.spins[i] = -self.spins[i];
    }

    pub fn into_spins(self) -> SpinAssignment {
        SpinAssignment(self.spins)
    }
}

fn full_rowsums(view: &SymmetrizedView, s: &[i8]) -> Vec<f64> {
    (0..view.node_count())
        .map(|i| {
            let si = f64::from(s[i]);
            view.neighbors(i)
                .map(|(j, w)| si * w * f64::from(s[j]))
                .sum()
        })
        .collect()
}

/// Single replica of the greedy heuristic seeded with `config.seed`.
pub fn heuristic_ground_state(
    view: &SymmetrizedView,
    config: &ReplicaConfig,
) -> Result<GroundStateResult> {
    heuristic_ground_state_observed(view, config, |_, _| {})
}

/// As [`heuristic_ground_state`], calling `observer(state, i)` after every
/// accepted flip of node `i` during descent.
pub fn heuristic_ground_state_observed(
    view: &SymmetrizedView,
    config: &ReplicaConfig,
    mut observer: impl FnMut(&FlipState<'_>, usize),
) -> Result<GroundStateResult> {
    let n = view.node_count();
    check_view(view, &SpinAssignment::all_up(n))?;
    if config.max_iterations == 0 {
        return Err(Error::InvalidArgument(
            "max_iterations must be at least 1".into(),
        ));
    }
    let total = view.total_abs();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut spins = vec![1i8; n];
    for _ in 0..config.initial_flips {
        let i = rng.random_range(0..n);
        spins[i] = -spins[i];
    }

    let mut state = FlipState::new(view, SpinAssignment(spins))?;
    let mut heap = IndexedMinHeap::new(&state.rowsum);
    let threshold = -NEGATIVE_ROWSUM_TOLERANCE * total;
    let mut aligned = config
        .record_trace
        .then(|| aligned_weight(view, &state.spins));
    let mut trace = aligned.map(|a| vec![0.5 * (1.0 - a / total)]);

    let mut flips = 0u64;
    loop {
        while flips < config.max_iterations {
            let Some((i, r)) = heap.peek() else { break };
            if r >= threshold {
                break;
            }
            state.flip(i);
            flips += 1;
            heap.update(i, state.rowsum[i]);
            for (j, _) in view.neighbors(i) {
                heap.update(j, state.rowsum[j]);
            }
            if let (Some(a), Some(t)) = (aligned.as_mut(), trace.as_mut()) {
                *a -= 4.0 * r;
                t.push(0.5 * (1.0 - *a / total));
            }
            observer(&state, i);
        }
        if !config.cluster_moves || flips >= config.max_iterations {
            break;
        }
        let moves = cluster_moves(view, &state.spins, -threshold);
        if moves.is_empty() {
            break;
        }
        for (members, boundary) in moves {
            for &i in &members {
                state.flip(i);
                heap.update(i, state.rowsum[i]);
                for (j, _) in view.neighbors(i) {
                    heap.update(j, state.rowsum[j]);
                }
                observer(&state, i);
            }
            flips += members.len() as u64;
            if let (Some(a), Some(t)) = (aligned.as_mut(), trace.as_mut()) {
                *a += 4.0 * boundary;
                t.push(0.5 * (1.0 - *a / total));
            }
        }
    }

    let spins = state.into_spins();
    let epsilon_hat = energy(view, &spins)?;
    Ok(GroundStateResult {
        epsilon_hat,
        spins,
        flips_performed: flips,
        energy_trace: trace,
        replica_seed: config.seed,
    })
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Clusters of nodes joined by satisfied edges (`s_i A_u[i][j] s_j > 0`).
/// Every edge leaving a cluster is unsatisfied, so flipping the cluster gains
/// its boundary weight. Returns a set of pairwise non-adjacent clusters with
/// boundary weight above `min_gain`, largest gain first, each with its
/// members and boundary weight.
fn cluster_moves(view: &SymmetrizedView, s: &[i8], min_gain: f64) -> Vec<(Vec<usize>, f64)> {
    let n = view.node_count();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for (j, w) in view.neighbors(i) {
            if j > i && f64::from(s[i] * s[j]) * w > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let root: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut boundary = vec![0.0; n];
    for i in 0..n {
        for (j, w) in view.neighbors(i) {
            if root[j] != root[i] {
                boundary[root[i]] += w.abs();
            }
        }
    }
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| root[i] == i && boundary[i] > min_gain)
        .collect();
    candidates.sort_by(|&a, &b| boundary[b].total_cmp(&boundary[a]).then(a.cmp(&b)));
    if candidates.is_empty() {
        return Vec::new();
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        members[root[i]].push(i);
    }
    let mut blocked = vec![false; n];
    let mut chosen = Vec::new();
    for c in candidates {
        if blocked[c] {
            continue;
        }
        blocked[c] = true;
        for &i in &members[c] {
            for (j, _) in view.neighbors(i) {
                blocked[root[j]] = true;
            }
        }
        chosen.push((std::mem::take(&mut members[c]), boundary[c]));
    }
    chosen
}

/// Runs `replica_count` independent replicas in parallel; replica `r` is
/// seeded with `seed ^ r`.
pub fn run_replicas(view: &SymmetrizedView, config: &ReplicaConfig) -> Result<ReplicaOutcome> {
    config.validate()?;
    let results = (0..config.replica_count as u64)
        .into_par_iter()
        .map(|r| {
            let replica = ReplicaConfig {
                seed: config.seed ^ r,
                ..config.clone()
            };
            heuristic_ground_state(view, &replica)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.epsilon_hat
                .total_cmp(&b.1.epsilon_hat)
                .then(a.0.cmp(&b.0))
        })
        .map(|(k, _)| k)
        .expect("at least one replica");
    Ok(ReplicaOutcome { results, best })
}

/// Exact frustration index by enumerating the `2^(n-1)` spin classes with
/// `s_0 = +1`, in Gray-code order.
pub fn brute_force_frustration(
    view: &SymmetrizedView,
    cap: usize,
) -> Result<(f64, SpinAssignment)> {
    let n = view.node_count();
    if n > cap || n > 40 {
        return Err(Error::TooLarge { n, cap });
    }
    let start = SpinAssignment::all_up(n);
    let mut best_energy = energy(view, &start)?;
    let mut best_spins = start.clone();
    let total = view.total_abs();
    let slack = 1e-9 * total;

    let mut state = FlipState::new(view, start)?;
    let mut aligned = aligned_weight(view, state.spins());
    let mut best_aligned = aligned;
    let classes = 1u64 << n.saturating_sub(1);
    for k in 1..classes {
        let i = k.trailing_zeros() as usize + 1;
        aligned -= 4.0 * state.rowsum[i];
        state.flip(i);
        if aligned > best_aligned - slack {
            let spins = SpinAssignment(state.spins.clone());
            let e = energy(view, &spins)?;
            if e < best_energy {
                best_energy = e;
                best_spins = spins;
            }
            best_aligned = best_aligned.max(aligned);
        }
    }
    Ok((best_energy, best_spins))
}

/// Frustration of an active subgraph: symmetrize, then run the replicas.
pub fn active_frustration(
    graph: &SignedSparseGraph,
    config: &ReplicaConfig,
) -> Result<ReplicaOutcome> {
    if graph.edge_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    run_replicas(&symmetrize(graph), config)
}
