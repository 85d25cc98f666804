//! Independent oracles shared by the integration and acceptance suites.
//! Everything here recomputes results by brute force, never through the
//! code paths under test.
#![allow(dead_code)] // each test binary uses a subset

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use sigver::ged::CostParams;
use sigver::graph::KeypointGraph;
use sigver::lsap::{CostMatrix, FORBIDDEN};

/// Exhaustive minimum assignment cost over all permutations.
pub fn brute_force_lsap(matrix: &CostMatrix) -> f64 {
    fn recurse(matrix: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        let n = matrix.dim();
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..n {
            if used[col] {
                continue;
            }
            let c = matrix.get(row, col);
            if c >= FORBIDDEN {
                continue;
            }
            used[col] = true;
            recurse(matrix, row + 1, used, acc + c, best);
            used[col] = false;
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; matrix.dim()];
    recurse(matrix, 0, &mut used, 0.0, &mut best);
    best
}

/// Exact graph edit distance by exhaustive search over node maps: every
/// node of `g1` is substituted to an unused node of `g2` or deleted,
/// remaining `g2` nodes are inserted, and edge operations follow from the
/// map (an edge survives with zero substitution cost iff both endpoints
/// are substituted onto an existing edge of `g2`).
pub fn exact_ged(g1: &KeypointGraph, g2: &KeypointGraph, params: &CostParams) -> f64 {
    let n1 = g1.node_count();
    let n2 = g2.node_count();
    let e2: std::collections::HashSet<(usize, usize)> = g2.edges().iter().copied().collect();

    fn recurse(
        g1: &KeypointGraph,
        g2: &KeypointGraph,
        e2: &std::collections::HashSet<(usize, usize)>,
        params: &CostParams,
        node: usize,
        mapping: &mut Vec<Option<usize>>,
        used: &mut [bool],
        best: &mut f64,
    ) {
        let n1 = g1.node_count();
        if node == n1 {
            let n2 = g2.node_count();
            let substituted = mapping.iter().filter(|m| m.is_some()).count();
            let deletions = n1 - substituted;
            let insertions = n2 - substituted;
            let mut cost = params.c_node * (deletions + insertions) as f64;
            for (u, assignment) in mapping.iter().enumerate() {
                if let Some(v) = assignment {
                    let (x1, y1) = g1.labels()[u];
                    let (x2, y2) = g2.labels()[*v];
                    cost += ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt();
                }
            }
            let mut matched = 0usize;
            for &(a, b) in g1.edges() {
                if let (Some(x), Some(y)) = (mapping[a], mapping[b]) {
                    let key = if x < y { (x, y) } else { (y, x) };
                    if e2.contains(&key) {
                        matched += 1;
                    }
                }
            }
            cost += params.c_edge
                * ((g1.edge_count() - matched) + (g2.edge_count() - matched)) as f64;
            if cost < *best {
                *best = cost;
            }
            return;
        }
        // delete this node
        mapping.push(None);
        recurse(g1, g2, e2, params, node + 1, mapping, used, best);
        mapping.pop();
        // or substitute it
        for v in 0..g2.node_count() {
            if used[v] {
                continue;
            }
            used[v] = true;
            mapping.push(Some(v));
            recurse(g1, g2, e2, params, node + 1, mapping, used, best);
            mapping.pop();
            used[v] = false;
        }
    }

    let mut best = f64::INFINITY;
    let mut mapping = Vec::with_capacity(n1);
    let mut used = vec![false; n2];
    recurse(
        g1,
        g2,
        &e2,
        params,
        0,
        &mut mapping,
        &mut used,
        &mut best,
    );
    best
}

/// Random labeled graph with up to `max_nodes` nodes and random edges.
pub fn random_graph(rng: &mut ChaCha20Rng, max_nodes: usize) -> KeypointGraph {
    let n = rng.gen_range(0..=max_nodes);
    let labels: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)))
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.3) {
                edges.push((a, b));
            }
        }
    }
    KeypointGraph::new(labels, edges)
}
