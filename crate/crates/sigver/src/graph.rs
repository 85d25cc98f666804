//! Keypoint graphs extracted from skeleton images.
//!
//! Nodes are end-points (exactly one skeleton neighbor), junction-points
//! (three or more neighbors, adjacent junction pixels merged into one node
//! at their centroid) and additional points sampled every `D` pixels of
//! traversed path length along each branch. Unlabeled undirected edges
//! connect nodes that are connected on the skeleton. Node labels are the
//! pixel coordinates, translated so their mean is (0, 0).

use std::fmt::Write as _;

use thiserror::Error;

use crate::raster::SkeletonImage;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Sampling interval along skeleton branches, in pixels of path length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphExtractionParams {
    pub sampling_interval: f64,
}

impl GraphExtractionParams {
    pub fn new(sampling_interval: f64) -> Self {
        assert!(sampling_interval > 0.0, "sampling interval must be positive");
        Self { sampling_interval }
    }
}

impl Default for GraphExtractionParams {
    fn default() -> Self {
        Self::new(25.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointRole {
    End,
    Junction,
    Sampled,
}

/// A structural or sampled point on the skeleton, in raw pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub role: KeypointRole,
}

/// Labeled graph with 2-D node labels and unlabeled undirected edges.
///
/// Node ids are dense indices `0..node_count()`. Labels are centered: the
/// mean over all labels is (0, 0) to within 1e-9 per axis. Edges are stored
/// canonically (`a < b`, sorted, deduplicated, no self-loops).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointGraph {
    labels: Vec<(f64, f64)>,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
}

impl KeypointGraph {
    /// Build a graph from labels and edges. Labels are centered, edges are
    /// canonicalized (self-loops dropped, duplicates merged).
    ///
    /// Panics if an edge references a node id out of range.
    pub fn new(labels: Vec<(f64, f64)>, edges: Vec<(usize, usize)>) -> Self {
        let n = labels.len();
        let mut canonical: Vec<(usize, usize)> = edges
            .into_iter()
            .filter(|&(a, b)| a != b)
            .map(|(a, b)| {
                assert!(a < n && b < n, "edge ({a},{b}) out of range for {n} nodes");
                if a < b {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        canonical.sort_unstable();
        canonical.dedup();

        let mut labels = labels;
        center_labels(&mut labels);

        let mut degrees = vec![0usize; n];
        for &(a, b) in &canonical {
            degrees[a] += 1;
            degrees[b] += 1;
        }

        Self {
            labels,
            edges: canonical,
            degrees,
        }
    }

    pub fn empty() -> Self {
        Self {
            labels: Vec::new(),
            edges: Vec::new(),
            degrees: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[(f64, f64)] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    /// Line-oriented text format: header `n m`, then `n` lines `id x y`,
    /// then `m` lines `id1 id2`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.node_count(), self.edge_count());
        for (id, (x, y)) in self.labels.iter().enumerate() {
            let _ = writeln!(out, "{} {} {}", id, x, y);
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{} {}", a, b);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (line_no, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let mut parts = header.split_whitespace();
        let parse_count = |s: Option<&str>, line: usize| -> Result<usize, GraphError> {
            s.ok_or(GraphError::Parse {
                line: line + 1,
                message: "expected two counts in header".into(),
            })?
            .parse()
            .map_err(|e| GraphError::Parse {
                line: line + 1,
                message: format!("bad count: {e}"),
            })
        };
        let n = parse_count(parts.next(), line_no)?;
        let m = parse_count(parts.next(), line_no)?;

        let mut labels = vec![(0.0, 0.0); n];
        for _ in 0..n {
            let (line_no, line) = lines.next().ok_or(GraphError::Parse {
                line: 0,
                message: "unexpected end of node list".into(),
            })?;
            let mut p = line.split_whitespace();
            let err = |message: String| GraphError::Parse {
                line: line_no + 1,
                message,
            };
            let id: usize = p
                .next()
                .ok_or_else(|| err("missing node id".into()))?
                .parse()
                .map_err(|e| err(format!("bad node id: {e}")))?;
            if id >= n {
                return Err(err(format!("node id {id} out of range")));
            }
            let x: f64 = p
                .next()
                .ok_or_else(|| err("missing x".into()))?
                .parse()
                .map_err(|e| err(format!("bad x: {e}")))?;
            let y: f64 = p
                .next()
                .ok_or_else(|| err("missing y".into()))?
                .parse()
                .map_err(|e| err(format!("bad y: {e}")))?;
            labels[id] = (x, y);
        }

        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            let (line_no, line) = lines.next().ok_or(GraphError::Parse {
                line: 0,
                message: "unexpected end of edge list".into(),
            })?;
            let mut p = line.split_whitespace();
            let err = |message: String| GraphError::Parse {
                line: line_no + 1,
                message,
            };
            let a: usize = p
                .next()
                .ok_or_else(|| err("missing edge endpoint".into()))?
                .parse()
                .map_err(|e| err(format!("bad endpoint: {e}")))?;
            let b: usize = p
                .next()
                .ok_or_else(|| err("missing edge endpoint".into()))?
                .parse()
                .map_err(|e| err(format!("bad endpoint: {e}")))?;
            if a >= n || b >= n {
                return Err(err(format!("edge ({a},{b}) out of range")));
            }
            edges.push((a, b));
        }

        Ok(Self::new(labels, edges))
    }

    /// GXL export with `x`/`y` float attributes, for interchange.
    pub fn to_gxl(&self, graph_id: &str) -> String {
        let mut out = String::new();
        out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<gxl>\n");
        let _ = writeln!(
            out,
            "  <graph id=\"{}\" edgeids=\"false\" edgemode=\"undirected\">",
            graph_id
        );
        for (id, (x, y)) in self.labels.iter().enumerate() {
            let _ = writeln!(
                out,
                "    <node id=\"_{id}\"><attr name=\"x\"><float>{x}</float></attr><attr name=\"y\"><float>{y}</float></attr></node>"
            );
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "    <edge from=\"_{a}\" to=\"_{b}\"/>");
        }
        out.push_str("  </graph>\n</gxl>\n");
        out
    }
}

/// Translate labels so their mean is (0, 0). A second correction pass keeps
/// the residual well below the 1e-9 invariant even for large graphs.
fn center_labels(labels: &mut [(f64, f64)]) {
    if labels.is_empty() {
        return;
    }
    for _ in 0..2 {
        let n = labels.len() as f64;
        let (sx, sy) = labels
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
        let (mx, my) = (sx / n, sy / n);
        for l in labels.iter_mut() {
            l.0 -= mx;
            l.1 -= my;
        }
    }
}

// Fixed neighbor order (N, NE, E, SE, S, SW, W, NW); walks and scans use it
// so extraction is deterministic.
const NEIGHBORS: [(isize, isize); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn step_length(from: (usize, usize), to: (usize, usize)) -> f64 {
    if from.0 != to.0 && from.1 != to.1 {
        SQRT2
    } else {
        1.0
    }
}

struct Tracer<'a> {
    skel: &'a SkeletonImage,
    width: usize,
    height: usize,
    neighbor_count: Vec<u8>,
    /// node id for structural pixels (endpoints and junction-cluster members)
    node_of_pixel: Vec<Option<usize>>,
    visited: Vec<bool>,
    keypoints: Vec<Keypoint>,
    edges: Vec<(usize, usize)>,
    sampling: f64,
}

impl<'a> Tracer<'a> {
    fn new(skel: &'a SkeletonImage, sampling: f64) -> Self {
        let (width, height) = (skel.width(), skel.height());
        let mut neighbor_count = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                if !skel.get(x, y) {
                    continue;
                }
                let mut c = 0;
                for (dx, dy) in NEIGHBORS {
                    if skel.get_signed(x as isize + dx, y as isize + dy) {
                        c += 1;
                    }
                }
                neighbor_count[y * width + x] = c;
            }
        }
        Self {
            skel,
            width,
            height,
            neighbor_count,
            node_of_pixel: vec![None; width * height],
            visited: vec![false; width * height],
            keypoints: Vec::new(),
            edges: Vec::new(),
            sampling,
        }
    }

    fn idx(&self, p: (usize, usize)) -> usize {
        p.1 * self.width + p.0
    }

    fn ink_neighbors_of(&self, p: (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(8);
        for (dx, dy) in NEIGHBORS {
            let (nx, ny) = (p.0 as isize + dx, p.1 as isize + dy);
            if self.skel.get_signed(nx, ny) {
                out.push((nx as usize, ny as usize));
            }
        }
        out
    }

    fn add_keypoint(&mut self, x: f64, y: f64, role: KeypointRole) -> usize {
        self.keypoints.push(Keypoint { x, y, role });
        self.keypoints.len() - 1
    }

    fn run(mut self) -> (Vec<Keypoint>, Vec<(usize, usize)>) {
        self.collect_structural_nodes();
        self.trace_branches();
        self.trace_loops();
        (self.keypoints, self.edges)
    }

    fn collect_structural_nodes(&mut self) {
        // endpoints first, then junction clusters, all in scan order
        for y in 0..self.height {
            for x in 0..self.width {
                if self.skel.get(x, y) && self.neighbor_count[y * self.width + x] == 1 {
                    let id = self.add_keypoint(x as f64, y as f64, KeypointRole::End);
                    self.node_of_pixel[y * self.width + x] = Some(id);
                }
            }
        }
        // 8-connected clusters of junction pixels merge into one node at
        // their centroid
        let mut seen = vec![false; self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                let idx = y * self.width + x;
                if !self.skel.get(x, y) || self.neighbor_count[idx] < 3 || seen[idx] {
                    continue;
                }
                let mut cluster = Vec::new();
                let mut stack = vec![(x, y)];
                seen[idx] = true;
                while let Some(p) = stack.pop() {
                    cluster.push(p);
                    for n in self.ink_neighbors_of(p) {
                        let nidx = self.idx(n);
                        if self.neighbor_count[nidx] >= 3 && !seen[nidx] {
                            seen[nidx] = true;
                            stack.push(n);
                        }
                    }
                }
                let cx = cluster.iter().map(|p| p.0 as f64).sum::<f64>() / cluster.len() as f64;
                let cy = cluster.iter().map(|p| p.1 as f64).sum::<f64>() / cluster.len() as f64;
                let id = self.add_keypoint(cx, cy, KeypointRole::Junction);
                for p in cluster {
                    let pidx = self.idx(p);
                    self.node_of_pixel[pidx] = Some(id);
                }
            }
        }
    }

    fn trace_branches(&mut self) {
        for y in 0..self.height {
            for x in 0..self.width {
                let p = (x, y);
                let pidx = self.idx(p);
                let Some(start_node) = self.node_of_pixel[pidx] else {
                    continue;
                };
                for q in self.ink_neighbors_of(p) {
                    let qidx = self.idx(q);
                    if let Some(other) = self.node_of_pixel[qidx] {
                        // zero-interior branch between adjacent structural
                        // pixels; same-node adjacency is cluster-internal
                        if other != start_node {
                            self.edges.push((start_node, other));
                        }
                        continue;
                    }
                    if self.visited[qidx] {
                        continue;
                    }
                    self.walk_branch(start_node, p, q);
                }
            }
        }
    }

    /// Walk a chain of non-structural pixels from `first` (entered from
    /// structural pixel `from`), placing sampled nodes at every multiple of
    /// the sampling interval, until another structural pixel terminates the
    /// branch.
    fn walk_branch(&mut self, start_node: usize, from: (usize, usize), first: (usize, usize)) {
        let mut dist = step_length(from, first);
        let mut next_mark = self.sampling;
        let mut prev = from;
        let mut cur = first;
        let mut last_node = start_node;

        loop {
            let cidx = self.idx(cur);
            if let Some(end_node) = self.node_of_pixel[cidx] {
                if end_node != last_node {
                    self.edges.push((last_node, end_node));
                } else if last_node == start_node {
                    // branch returned to its origin with no samples placed;
                    // a self-loop carries no structure, drop it
                }
                return;
            }
            self.visited[cidx] = true;

            if dist + 1e-9 >= next_mark {
                let id = self.add_keypoint(cur.0 as f64, cur.1 as f64, KeypointRole::Sampled);
                self.edges.push((last_node, id));
                last_node = id;
                while dist + 1e-9 >= next_mark {
                    next_mark += self.sampling;
                }
            }

            let next = self
                .ink_neighbors_of(cur)
                .into_iter()
                .find(|&n| n != prev);
            let Some(next) = next else {
                // dead end without a structural terminator; nothing to connect
                return;
            };
            dist += step_length(cur, next);
            prev = cur;
            cur = next;
        }
    }

    /// Closed loops with no structural point: anchor a sampled node at the
    /// topmost-leftmost loop pixel, then walk the cycle. Also covers
    /// isolated single pixels.
    fn trace_loops(&mut self) {
        for y in 0..self.height {
            for x in 0..self.width {
                let p = (x, y);
                let pidx = self.idx(p);
                if !self.skel.get(x, y)
                    || self.node_of_pixel[pidx].is_some()
                    || self.visited[pidx]
                {
                    continue;
                }
                self.visited[pidx] = true;
                let anchor = self.add_keypoint(x as f64, y as f64, KeypointRole::Sampled);
                let neighbors = self.ink_neighbors_of(p);
                let Some(&first) = neighbors.first() else {
                    continue; // isolated pixel: a single node, no edges
                };

                let mut dist = step_length(p, first);
                let mut next_mark = self.sampling;
                let mut prev = p;
                let mut cur = first;
                let mut last_node = anchor;
                loop {
                    if cur == p {
                        if last_node != anchor {
                            self.edges.push((last_node, anchor));
                        }
                        break;
                    }
                    let cidx = self.idx(cur);
                    self.visited[cidx] = true;
                    if dist + 1e-9 >= next_mark {
                        let id =
                            self.add_keypoint(cur.0 as f64, cur.1 as f64, KeypointRole::Sampled);
                        self.edges.push((last_node, id));
                        last_node = id;
                        while dist + 1e-9 >= next_mark {
                            next_mark += self.sampling;
                        }
                    }
                    let next = self
                        .ink_neighbors_of(cur)
                        .into_iter()
                        .find(|&n| n != prev);
                    let Some(next) = next else {
                        break;
                    };
                    dist += step_length(cur, next);
                    prev = cur;
                    cur = next;
                }
            }
        }
    }
}

/// Extract end-points, junction-points and equidistantly sampled points from
/// a skeleton, in raw pixel coordinates. An empty skeleton yields an empty
/// list.
pub fn extract_keypoints(
    skeleton: &SkeletonImage,
    params: &GraphExtractionParams,
) -> Vec<Keypoint> {
    Tracer::new(skeleton, params.sampling_interval).run().0
}

/// Build the keypoint graph of a skeleton: one node per keypoint, an edge
/// between nodes directly connected along the skeleton, labels centered so
/// their mean is (0, 0). An empty skeleton yields an empty graph.
pub fn build_graph(skeleton: &SkeletonImage, params: &GraphExtractionParams) -> KeypointGraph {
    let (keypoints, edges) = Tracer::new(skeleton, params.sampling_interval).run();
    let labels = keypoints.iter().map(|k| (k.x, k.y)).collect();
    KeypointGraph::new(labels, edges)
}
