//! Bipartite approximation of graph edit distance between keypoint graphs.
//!
//! The comparison of two graphs is reduced to a linear sum assignment over
//! their nodes. Edge structure enters through local degree terms with the
//! edge cost split between the two endpoints, which makes the assignment
//! optimum a lower bound of the exact edit distance under the same cost
//! function. The bound is normalized by the maximum edit distance (delete
//! everything in one graph, insert everything of the other), giving a
//! dissimilarity in [0, 1].

use crate::graph::{build_graph, GraphExtractionParams, KeypointGraph};
use crate::lsap::{self, CostMatrix};
use crate::preprocess::{binarize, skeletonize};
use crate::raster::GrayImage;

/// Constant node and edge deletion/insertion costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub c_node: f64,
    pub c_edge: f64,
}

impl CostParams {
    pub fn new(c_node: f64, c_edge: f64) -> Self {
        assert!(c_node >= 0.0 && c_edge >= 0.0, "costs must be non-negative");
        Self { c_node, c_edge }
    }
}

impl Default for CostParams {
    fn default() -> Self {
        Self::new(25.0, 45.0)
    }
}

/// Result of one graph comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GedResult {
    /// Assignment optimum: a lower bound of the exact edit distance.
    pub lower_bound: f64,
    /// Cost of deleting one graph entirely and inserting the other.
    pub max_ged: f64,
    /// `lower_bound / max_ged`, clamped to [0, 1]; 0 when both graphs are
    /// empty, 1 when exactly one is.
    pub normalized: f64,
    /// Either input graph was empty.
    pub degenerate: bool,
}

/// Standard bipartite layout: rows are nodes of `g1` followed by insertion
/// rows, columns are nodes of `g2` followed by deletion columns.
///
/// * substitution block: Euclidean label distance plus `c_edge/2` per unit
///   of degree difference,
/// * deletion diagonal: `c_node + (c_edge/2) * deg(u)`, off-diagonal
///   forbidden,
/// * insertion diagonal: `c_node + (c_edge/2) * deg(v)`, off-diagonal
///   forbidden,
/// * epsilon-to-epsilon block: zero.
pub fn build_cost_matrix(
    g1: &KeypointGraph,
    g2: &KeypointGraph,
    params: &CostParams,
) -> CostMatrix {
    let (n1, n2) = (g1.node_count(), g2.node_count());
    let dim = n1 + n2;
    let half_edge = params.c_edge / 2.0;
    let mut entries = vec![0.0f64; dim * dim];

    for i in 0..n1 {
        let (x1, y1) = g1.labels()[i];
        let deg1 = g1.degree(i) as f64;
        for j in 0..n2 {
            let (x2, y2) = g2.labels()[j];
            let deg2 = g2.degree(j) as f64;
            let label_dist = ((x1 - x2).powi(2) + (y1 - y2).powi(2)).sqrt();
            entries[i * dim + j] = label_dist + half_edge * (deg1 - deg2).abs();
        }
        for j in n2..dim {
            entries[i * dim + j] = if j - n2 == i {
                params.c_node + half_edge * deg1
            } else {
                f64::INFINITY
            };
        }
    }
    for i in n1..dim {
        for j in 0..n2 {
            entries[i * dim + j] = if i - n1 == j {
                params.c_node + half_edge * g2.degree(j) as f64
            } else {
                f64::INFINITY
            };
        }
        // epsilon-to-epsilon entries stay zero
    }

    CostMatrix::new(dim, entries).expect("constructed entries are valid")
}

/// Assignment optimum of the bipartite matrix: a lower bound of the exact
/// graph edit distance under the same cost function.
pub fn ged_lower_bound(g1: &KeypointGraph, g2: &KeypointGraph, params: &CostParams) -> f64 {
    let matrix = build_cost_matrix(g1, g2, params);
    lsap::solve(&matrix)
        .expect("bipartite matrix always has a finite perfect assignment")
        .total_cost
}

/// Maximum graph edit distance: delete all nodes and edges of the first
/// graph, insert all nodes and edges of the second.
pub fn ged_max(g1: &KeypointGraph, g2: &KeypointGraph, params: &CostParams) -> f64 {
    (g1.node_count() + g2.node_count()) as f64 * params.c_node
        + (g1.edge_count() + g2.edge_count()) as f64 * params.c_edge
}

/// Compare two keypoint graphs.
pub fn compare_graphs(g1: &KeypointGraph, g2: &KeypointGraph, params: &CostParams) -> GedResult {
    let degenerate = g1.is_empty() || g2.is_empty();
    let lower_bound = ged_lower_bound(g1, g2, params);
    let max_ged = ged_max(g1, g2, params);
    let normalized = if g1.is_empty() && g2.is_empty() {
        0.0
    } else if degenerate {
        1.0
    } else if max_ged > 0.0 {
        (lower_bound / max_ged).clamp(0.0, 1.0)
    } else {
        0.0
    };
    GedResult {
        lower_bound,
        max_ged,
        normalized,
        degenerate,
    }
}

/// Full structural dissimilarity of two signature images: binarize,
/// skeletonize, build keypoint graphs, compare. The value is in [0, 1].
pub fn dissimilarity_ged(
    reference: &GrayImage,
    questioned: &GrayImage,
    params: &CostParams,
    extraction: &GraphExtractionParams,
) -> GedResult {
    let g1 = graph_of_image(reference, extraction);
    let g2 = graph_of_image(questioned, extraction);
    compare_graphs(&g1, &g2, params)
}

/// Image-to-graph front half of the pipeline, exposed so callers can cache
/// graphs across many comparisons.
pub fn graph_of_image(image: &GrayImage, extraction: &GraphExtractionParams) -> KeypointGraph {
    let skeleton = skeletonize(&binarize(image));
    build_graph(&skeleton, extraction)
}
