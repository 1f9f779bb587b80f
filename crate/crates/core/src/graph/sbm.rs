//! Stochastic block model generator with class-conditional Gaussian features.

use crate::kernel::{DenseMatrix, RngKey};

use super::store::Graph;
use super::GraphError;

/// Separation between class means relative to the unit feature noise. Chosen
/// so that raw features alone are informative but not trivially separable and
/// graph structure carries real signal.
const CLASS_MEAN_SCALE: f64 = 1.5;

/// Sample a stochastic block model: nodes are assigned to `classes` blocks
/// round-robin, within-block edges appear with probability `p_in`,
/// cross-block edges with `p_out`, and features are unit-variance Gaussians
/// around orthogonal class means.
pub fn make_synthetic_sbm(
    n: usize,
    classes: usize,
    p_in: f64,
    p_out: f64,
    d: usize,
    key: RngKey,
) -> Result<Graph, GraphError> {
    if classes == 0 || n < classes {
        return Err(GraphError::DegenerateSplit(format!(
            "need at least one node per class ({n} nodes, {classes} classes)"
        )));
    }
    if d < classes {
        return Err(GraphError::DegenerateSplit(format!(
            "feature dim {d} below class count {classes}; class means must be orthogonal"
        )));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out >= p_in {
        return Err(GraphError::DegenerateSplit(format!(
            "require 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }

    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();

    let mut edge_stream = key.child(0).stream();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if edge_stream.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }
    let adj = Graph::adjacency_from_edges(n, &edges).map_err(GraphError::from)?;

    // Orthogonal class means along the first `classes` coordinate axes.
    let mut feat_stream = key.child(1).stream();
    let features = DenseMatrix::filled(n, d, |i, j| {
        let mean = if j == labels[i] { CLASS_MEAN_SCALE } else { 0.0 };
        mean + feat_stream.normal()
    });

    Graph::new(adj, features, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Newman modularity of the label partition.
    fn modularity(g: &Graph) -> f64 {
        let two_m = g.adj.nnz() as f64;
        if two_m == 0.0 {
            return 0.0;
        }
        let mut per_class_internal = vec![0.0f64; g.num_classes];
        let mut per_class_degree = vec![0.0f64; g.num_classes];
        for i in 0..g.n() {
            per_class_degree[g.labels[i]] += g.degree(i) as f64;
            let (idx, _) = g.adj.row(i);
            for &j in idx {
                if g.labels[i] == g.labels[j] {
                    per_class_internal[g.labels[i]] += 1.0;
                }
            }
        }
        (0..g.num_classes)
            .map(|c| per_class_internal[c] / two_m - (per_class_degree[c] / two_m).powi(2))
            .sum()
    }

    #[test]
    fn extreme_probabilities_give_disconnected_cliques() {
        let g = make_synthetic_sbm(8, 2, 1.0, 0.0, 4, RngKey::new(0)).unwrap();
        for i in 0..8 {
            for j in (i + 1)..8 {
                let connected = g.adj.has_entry(i, j);
                assert_eq!(connected, g.labels[i] == g.labels[j], "pair ({i},{j})");
            }
        }
    }

    #[test]
    fn assortative_sbm_has_high_modularity() {
        let g = make_synthetic_sbm(200, 4, 0.1, 0.01, 8, RngKey::new(7)).unwrap();
        assert!(modularity(&g) > 0.3, "modularity {}", modularity(&g));
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = make_synthetic_sbm(60, 3, 0.2, 0.02, 6, RngKey::new(9)).unwrap();
        let b = make_synthetic_sbm(60, 3, 0.2, 0.02, 6, RngKey::new(9)).unwrap();
        assert_eq!(a.adj, b.adj);
        assert!(a.features.bits_eq(&b.features));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        assert!(make_synthetic_sbm(10, 2, 0.1, 0.5, 4, RngKey::new(0)).is_err());
        assert!(make_synthetic_sbm(10, 2, 1.5, 0.0, 4, RngKey::new(0)).is_err());
    }
}
