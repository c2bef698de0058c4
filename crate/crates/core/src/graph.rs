//! ε-neighborhood graphs, connectivity and shortest paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{invalid, Result};

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    components: usize,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], components: n }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `true` when `a` and `b` were in different sets.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        self.components -= 1;
        true
    }

    pub fn components(&self) -> usize {
        self.components
    }
}

/// Undirected graph with an edge `(i, j)` iff `e_ij < eps`.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    n: usize,
    eps: f64,
    /// Sorted `(i, j, e_ij)` with `i < j`.
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<u64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    /// Builds a graph from an explicit edge list (used for tests and
    /// synthetic graphs). Weights must be non-negative and finite.
    pub fn from_edges(n: usize, eps: f64, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut list = Vec::with_capacity(edges.len());
        for &(a, b, w) in edges {
            if a >= n || b >= n || a == b {
                return invalid(format!("bad edge ({a}, {b}) for n = {n}"));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return invalid(format!("edge ({a}, {b}) has weight {w}"));
            }
            list.push((a.min(b), a.max(b), w));
        }
        list.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        list.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
        let words = (n * n).div_ceil(64);
        let mut adjacency = vec![0u64; words];
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j, w) in &list {
            for (a, b) in [(i, j), (j, i)] {
                let bit = a * n + b;
                adjacency[bit / 64] |= 1 << (bit % 64);
                neighbors[a].push((b, w));
            }
        }
        Ok(Self { n, eps, edges: list, adjacency, neighbors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        let bit = i * self.n + j;
        self.adjacency[bit / 64] >> (bit % 64) & 1 == 1
    }

    /// JSON edge list `{n, eps, edges: [[i, j, w], ...]}`; an infinite `eps`
    /// is written as `null`.
    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            n: self.n,
            eps: self.eps.is_finite().then_some(self.eps),
            edges: self.edges.iter().map(|&(i, j, w)| (i, j, w)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub n: usize,
    pub eps: Option<f64>,
    pub edges: Vec<(usize, usize, f64)>,
}

/// ε-graph with the strict threshold `e_ij < eps`.
pub fn build_eps_graph(d: &DissimilarityMatrix, eps: f64) -> Result<NeighborGraph> {
    if !(eps > 0.0) {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    let n = d.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = d.get(i, j);
            if w < eps {
                edges.push((i, j, w));
            }
        }
    }
    NeighborGraph::from_edges(n, eps, &edges)
}

/// Component labels in `[0, C)`, numbered by first appearance.
pub fn connected_components(g: &NeighborGraph) -> Vec<usize> {
    let mut ds = DisjointSet::new(g.n());
    for &(i, j, _) in g.edges() {
        ds.union(i, j);
    }
    let mut label_of_root = vec![usize::MAX; g.n()];
    let mut next = 0;
    (0..g.n())
        .map(|v| {
            let r = ds.find(v);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}

pub fn component_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Vertices of the largest component in increasing order (ties go to the
/// component with the smallest label).
pub fn largest_component(labels: &[usize]) -> Vec<usize> {
    let c = component_count(labels);
    let mut sizes = vec![0usize; c];
    for &l in labels {
        sizes[l] += 1;
    }
    let best = (0..c).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(0);
    (0..labels.len()).filter(|&v| labels[v] == best).collect()
}

/// One single-linkage merge: after merging at distance `merge_eps`, the
/// graph has `components` components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub merge_eps: f64,
    pub components: usize,
}

/// 0-dimensional persistence of the ε-graph filtration.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceEvents {
    pub n: usize,
    pub events: Vec<MergeEvent>,
}

impl PersistenceEvents {
    /// Number of components of `build_eps_graph(d, eps)`.
    pub fn components_at(&self, eps: f64) -> usize {
        self.n - self.events.iter().take_while(|e| e.merge_eps < eps).count()
    }

    /// Final component count once every pair is linked.
    pub fn final_components(&self) -> usize {
        self.events.last().map_or(self.n, |e| e.components)
    }

    /// `[start, end)` range of `eps` over which the graph has exactly
    /// `components` components, if that count ever occurs.
    pub fn plateau(&self, components: usize) -> Option<(f64, f64)> {
        if components > self.n || components < self.final_components() {
            return None;
        }
        let merges_needed = self.n - components;
        let start = if merges_needed == 0 { 0.0 } else { self.events[merges_needed - 1].merge_eps };
        let end = self.events.get(merges_needed).map_or(f64::INFINITY, |e| e.merge_eps);
        // `components_at` uses strict inequality, so the plateau opens just above `start`.
        (end > start).then_some((start, end))
    }

    /// Smallest threshold whose graph has at most `components` components,
    /// nudged above the merge distance because edges need `e_ij < eps`.
    pub fn eps_for_components(&self, components: usize) -> Option<f64> {
        let (start, _) = self.plateau(components)?;
        Some(if start > 0.0 { start * (1.0 + 1e-9) } else { f64::MIN_POSITIVE })
    }

    /// CSV rows `eps,components`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,components\n");
        for e in &self.events {
            s.push_str(&format!("{},{}\n", e.merge_eps, e.components));
        }
        s
    }
}

/// Single-linkage merge sequence via union-find over pairs sorted by distance.
pub fn zero_dim_persistence(d: &DissimilarityMatrix) -> PersistenceEvents {
    let n = d.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((d.get(i, j), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut ds = DisjointSet::new(n);
    let mut events = Vec::new();
    for (w, i, j) in pairs {
        if ds.union(i, j) {
            events.push(MergeEvent { merge_eps: w, components: ds.components() });
            if ds.components() == 1 {
                break;
            }
        }
    }
    PersistenceEvents { n, events }
}

#[derive(Copy, Clone, PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths; unreachable vertices get `+∞`.
pub fn dijkstra_from(g: &NeighborGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.n()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State { dist: 0.0, node: source });
    while let Some(State { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in g.neighbors(node) {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(State { dist: nd, node: next });
            }
        }
    }
    dist
}

/// All-pairs shortest paths, one Dijkstra per source.
pub fn all_pairs_shortest(g: &NeighborGraph) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..g.n()).into_par_iter().map(|s| dijkstra_from(g, s)).collect();
    DMatrix::from_fn(g.n(), g.n(), |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(n: usize, vals: &[f64]) -> DissimilarityMatrix {
        DissimilarityMatrix::new(DMatrix::from_row_slice(n, n, vals)).unwrap()
    }

    #[test]
    fn threshold_counts() {
        let d = dm(3, &[0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0, 0.0]);
        assert_eq!(build_eps_graph(&d, 2.5).unwrap().edges().len(), 2);
        assert_eq!(build_eps_graph(&d, f64::INFINITY).unwrap().edges().len(), 3);
        assert_eq!(build_eps_graph(&d, 0.5).unwrap().edges().len(), 0);
        // Strict inequality: ties are excluded.
        assert_eq!(build_eps_graph(&d, 2.0).unwrap().edges().len(), 1);
        assert!(build_eps_graph(&d, 0.0).is_err());
    }

    #[test]
    fn components_of_cliques_and_bridge() {
        let mut edges = vec![];
        for (a, b) in [(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)] {
            edges.push((a, b, 1.0));
        }
        let split = NeighborGraph::from_edges(6, 1.5, &edges).unwrap();
        assert_eq!(component_count(&connected_components(&split)), 2);
        edges.push((2, 3, 1.0));
        let joined = NeighborGraph::from_edges(6, 1.5, &edges).unwrap();
        assert_eq!(component_count(&connected_components(&joined)), 1);
        let empty = NeighborGraph::from_edges(4, 1.0, &[]).unwrap();
        assert_eq!(component_count(&connected_components(&empty)), 4);
    }

    #[test]
    fn two_point_persistence() {
        let d = dm(2, &[0.0, 1.0, 1.0, 0.0]);
        let p = zero_dim_persistence(&d);
        assert_eq!(p.events, vec![MergeEvent { merge_eps: 1.0, components: 1 }]);
        assert_eq!(p.components_at(1.0), 2);
        assert_eq!(p.components_at(1.0 + 1e-12), 1);
    }

    #[test]
    fn path_graph_distances() {
        let g = NeighborGraph::from_edges(4, 2.0, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let d = dijkstra_from(&g, 0);
        assert_eq!(d[2], 2.0);
        assert_eq!(d[3], f64::INFINITY);
        assert!(g.is_edge(1, 0) && !g.is_edge(0, 2));
    }

    #[test]
    fn json_export_writes_null_for_infinite_eps() {
        let g = NeighborGraph::from_edges(2, f64::INFINITY, &[(0, 1, 0.5)]).unwrap();
        let s = serde_json::to_string(&g.to_json()).unwrap();
        assert_eq!(s, r#"{"n":2,"eps":null,"edges":[[0,1,0.5]]}"#);
    }
}
