//! Out-of-distribution split generators: degree-quantile concept shifts and
//! orthogonal feature (covariate) shifts.

use crate::kernel::{haar_orthogonal, DenseMatrix, RngKey};

use super::store::{Graph, SplitMasks};
use super::GraphError;

/// Concept shift along node degree: train on nodes at or below the degree
/// quantile, test on the rest, with a seeded 10% of train held out for
/// validation.
pub fn make_degree_concept_split(
    g: &Graph,
    quantile: f64,
    key: RngKey,
) -> Result<SplitMasks, GraphError> {
    if !(0.0 < quantile && quantile < 1.0) {
        return Err(GraphError::DegenerateSplit(format!(
            "quantile {quantile} outside (0, 1)"
        )));
    }
    let n = g.n();
    let degrees: Vec<usize> = (0..n).map(|i| g.degree(i)).collect();
    let mut sorted = degrees.clone();
    sorted.sort_unstable();
    let threshold = sorted[((quantile * (n - 1) as f64).floor() as usize).min(n - 1)];

    let mut train: Vec<usize> = Vec::new();
    let mut test: Vec<usize> = Vec::new();
    for (i, &d) in degrees.iter().enumerate() {
        if d <= threshold {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(GraphError::DegenerateSplit(format!(
            "degree threshold {threshold} puts every node on one side"
        )));
    }

    // Hold out 10% of train (at least one node) for validation.
    let mut stream = key.stream();
    let mut pool = train.clone();
    stream.shuffle(&mut pool);
    let val_count = (pool.len() / 10).max(1);
    if val_count >= pool.len() {
        return Err(GraphError::DegenerateSplit(
            "train side too small to hold out validation nodes".into(),
        ));
    }
    let mut val: Vec<usize> = pool[..val_count].to_vec();
    val.sort_unstable();
    let mut train: Vec<usize> = pool[val_count..].to_vec();
    train.sort_unstable();

    SplitMasks::from_indices(n, &train, &val, &test)
}

/// Rotate every feature row by the given orthogonal matrix: row i becomes
/// `Q x_i`, i.e. `X Q^T`.
pub fn apply_shift_with(g: &Graph, q: &DenseMatrix) -> Result<Graph, GraphError> {
    let shifted = g.features.matmul(&q.transpose()).map_err(GraphError::from)?;
    Graph::new(g.adj.clone(), shifted, g.labels.clone(), g.num_classes)
}

/// Covariate shift by a Haar-random orthogonal transform of the features.
/// Returns the shifted graph and the sampled `Q`.
pub fn apply_orthogonal_shift(g: &Graph, key: RngKey) -> Result<(Graph, DenseMatrix), GraphError> {
    let mut stream = key.stream();
    let q = haar_orthogonal(g.feature_dim(), &mut stream);
    Ok((apply_shift_with(g, &q)?, q))
}

/// Orthogonal matrix rotating `planes` disjoint planes of a Haar-random
/// basis, each by the angle `strength * pi / 2`. `strength = 0` gives the
/// identity; `strength = 1` rotates each plane a quarter turn. The difference
/// from the identity has rank `2 * planes`, so few planes give a shift
/// confined to a low-dimensional subspace while the rest of feature space is
/// untouched.
pub fn sample_planar_rotation(
    dim: usize,
    planes: usize,
    strength: f64,
    key: RngKey,
) -> DenseMatrix {
    let planes = planes.min(dim / 2);
    let mut stream = key.stream();
    let basis = haar_orthogonal(dim, &mut stream);
    let theta = strength.clamp(0.0, 1.0) * std::f64::consts::FRAC_PI_2;
    let (sin, cos) = theta.sin_cos();
    let mut block = DenseMatrix::identity(dim);
    for p in 0..planes {
        let (i, j) = (2 * p, 2 * p + 1);
        block.set(i, i, cos);
        block.set(i, j, -sin);
        block.set(j, i, sin);
        block.set(j, j, cos);
    }
    basis
        .transpose()
        .matmul(&block)
        .and_then(|m| m.matmul(&basis))
        .expect("square chain")
}

/// Planar rotation across every available plane: a full-space shift whose
/// severity is set by `strength` alone.
pub fn sample_partial_rotation(dim: usize, strength: f64, key: RngKey) -> DenseMatrix {
    sample_planar_rotation(dim, dim / 2, strength, key)
}
