#![allow(dead_code)]

use frustra::graph_builder::{symmetrize, SignedSparseGraph, SymmetrizedView};
use rand::Rng;

/// Undirected edges `(i, j, w)` with `i > j`.
pub type EdgeList = Vec<(usize, usize, f64)>;

pub fn view_of(n: usize, edges: &EdgeList) -> SymmetrizedView {
    symmetrize(&SignedSparseGraph::from_edges(n, edges).unwrap())
}

/// Fraction of unsatisfied edge weight under `spins`.
pub fn unsatisfied_fraction(edges: &EdgeList, spins: &[i8]) -> f64 {
    let total: f64 = edges.iter().map(|e| e.2.abs()).sum();
    let unsat: f64 = edges
        .iter()
        .filter(|&&(i, j, w)| f64::from(spins[i] * spins[j]) * w < 0.0)
        .map(|e| e.2.abs())
        .sum();
    unsat / total
}

/// Minimum unsatisfied fraction over all `2^n` spin vectors.
pub fn exhaustive_frustration(n: usize, edges: &EdgeList) -> f64 {
    (0u32..1 << n)
        .map(|mask| {
            let spins: Vec<i8> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { -1 } else { 1 })
                .collect();
            unsatisfied_fraction(edges, &spins)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn random_edges(rng: &mut impl Rng, n: usize, density: f64, unit: bool) -> EdgeList {
    let mut edges = Vec::new();
    for i in 1..n {
        for j in 0..i {
            if rng.random_bool(density) {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mag = if unit {
                    1.0
                } else {
                    rng.random_range(0.05..2.0)
                };
                edges.push((i, j, sign * mag));
            }
        }
    }
    if edges.is_empty() {
        edges.push((1, 0, -1.0));
    }
    edges
}
