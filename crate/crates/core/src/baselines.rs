//! Classical MDS, IsoMap and the stress objective.

use nalgebra::DMatrix;

use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{invalid, Result};
use crate::graph::{all_pairs_shortest, build_eps_graph, connected_components, largest_component, NeighborGraph};
use crate::linalg::symmetric_eigen_desc;

/// Classical scaling of a (not necessarily Euclidean) distance matrix.
///
/// `B = −½ H D² H`; the embedding is the top-`q` eigenvectors scaled by the
/// square roots of their eigenvalues, negative eigenvalues truncated to 0.
pub(crate) fn classical_scaling(d: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let n = d.nrows();
    let d2 = d.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let (vals, vecs) = symmetric_eigen_desc(&b);
    DMatrix::from_fn(n, q, |i, k| vecs[(i, k)] * vals[k].max(0.0).sqrt())
}

/// Classical MDS into `q` dimensions; columns ordered by descending eigenvalue.
pub fn classical_mds(d: &DissimilarityMatrix, q: usize) -> Result<DMatrix<f64>> {
    if q == 0 || q > d.len() - 1 {
        return invalid(format!("MDS dimension must be in 1..={}, got {q}", d.len() - 1));
    }
    Ok(classical_scaling(d.values(), q))
}

/// IsoMap embedding of the largest component of the ε-graph.
#[derive(Debug, Clone)]
pub struct IsomapEmbedding {
    /// Rows follow `kept`.
    pub embedding: DMatrix<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// ε-graph → largest component → all-pairs shortest paths → classical MDS.
pub fn isomap(d: &DissimilarityMatrix, eps: f64, q: usize) -> Result<IsomapEmbedding> {
    let g = build_eps_graph(d, eps)?;
    let labels = connected_components(&g);
    let kept = largest_component(&labels);
    if kept.len() < q + 1 {
        return invalid(format!(
            "largest component has {} vertices, need at least {} for a {q}-dimensional embedding",
            kept.len(),
            q + 1
        ));
    }
    let dropped = (0..d.len()).filter(|v| kept.binary_search(v).is_err()).collect();
    let geo = if kept.len() == d.len() {
        all_pairs_shortest(&g)
    } else {
        all_pairs_shortest(&build_eps_graph(&d.restrict(&kept)?, eps)?)
    };
    Ok(IsomapEmbedding { embedding: classical_scaling(&geo, q), kept, dropped })
}

/// IsoMap over all points. Components of the ε-graph are joined by their
/// observed cross-component distances, so shortest paths stay finite.
pub fn isomap_all(d: &DissimilarityMatrix, eps: f64, q: usize) -> Result<DMatrix<f64>> {
    if q == 0 || q > d.len() - 1 {
        return invalid(format!("embedding dimension must be in 1..={}, got {q}", d.len() - 1));
    }
    let g = build_eps_graph(d, eps)?;
    let labels = connected_components(&g);
    let graph = if labels.iter().all(|&l| l == 0) {
        g
    } else {
        let mut edges = g.edges().to_vec();
        let n = d.len();
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] != labels[j] {
                    edges.push((i, j, d.get(i, j)));
                }
            }
        }
        NeighborGraph::from_edges(n, eps, &edges)?
    };
    Ok(classical_scaling(&all_pairs_shortest(&graph), q))
}

/// `Σ_{i<j} (d_ij − ‖z_i − z_j‖)²`.
pub fn stress(d: &DissimilarityMatrix, z: &DMatrix<f64>) -> Result<f64> {
    if z.nrows() != d.len() {
        return invalid(format!("embedding has {} rows for {} points", z.nrows(), d.len()));
    }
    let n = d.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dz = (z.row(i) - z.row(j)).norm();
            let r = d.get(i, j) - dz;
            s += r * r;
        }
    }
    Ok(s)
}
