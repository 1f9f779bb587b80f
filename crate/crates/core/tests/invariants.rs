//! Property tests over the kernel and pipeline invariants.

use proptest::prelude::*;
use std::sync::Arc;

use ttrf_core::backbone::{FrozenBackbone, GcnParams};
use ttrf_core::graph::{apply_shift_with, normalize, Graph};
use ttrf_core::iamae::mask_probabilities;
use ttrf_core::kernel::{
    gram_residual, haar_orthogonal, qr_reorthogonalize, DenseMatrix, RngKey, SparseAdjacency, Tape,
};
use ttrf_core::selection::{gate_probabilities, InterventionMask};

fn edges_strategy(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 0..(3 * n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spmm_matches_densified_oracle(seed in 0u64..1000, n in 2usize..50) {
        let mut s = RngKey::new(seed).stream();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if s.bernoulli(0.15) {
                    entries.push((i, j, s.uniform_in(-1.0, 1.0)));
                }
            }
        }
        let adj = SparseAdjacency::from_entries(n, &entries).unwrap();
        let m = DenseMatrix::filled(n, 3, |_, _| s.normal());
        let sparse = adj.matmul_dense(&m).unwrap();
        let dense = adj.to_dense().matmul(&m).unwrap();
        prop_assert!(sparse.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn spmm_is_differentiable_anywhere(seed in 0u64..500) {
        // Finite differences on a random sparse product match the tape.
        let mut s = RngKey::new(seed).stream();
        let n = 5;
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if s.bernoulli(0.4) {
                    entries.push((i, j, s.uniform_in(-1.0, 1.0)));
                }
            }
        }
        let adj = Arc::new(SparseAdjacency::from_entries(n, &entries).unwrap());
        let m0 = DenseMatrix::filled(n, 2, |_, _| s.normal());
        let eval = |m: &DenseMatrix| {
            let mut tape = Tape::new();
            let mid = tape.leaf(m);
            let prod = tape.spmm(&adj, mid).unwrap();
            let sq = tape.hadamard(prod, prod).unwrap();
            let loss = tape.sum_all(sq);
            tape.value(loss).get(0, 0)
        };
        let mut tape = Tape::new();
        let mid = tape.leaf(&m0);
        let prod = tape.spmm(&adj, mid).unwrap();
        let sq = tape.hadamard(prod, prod).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let got = grads.of(mid).unwrap();
        let mut fd = DenseMatrix::zeros(n, 2);
        for i in 0..m0.len() {
            let h = 1e-5;
            let mut plus = m0.clone();
            plus.data_mut()[i] += h;
            let mut minus = m0.clone();
            minus.data_mut()[i] -= h;
            fd.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let denom = fd.frob_norm().max(1e-6);
        prop_assert!(got.sub(&fd).unwrap().frob_norm() / denom < 1e-4);
    }

    #[test]
    fn reorthogonalization_is_idempotent(seed in 0u64..1000, r in 1usize..5, extra in 0usize..8) {
        let d = r + extra;
        let mut s = RngKey::new(seed).stream();
        let m = DenseMatrix::filled(r, d, |_, _| s.normal());
        if let Ok(once) = qr_reorthogonalize(&m) {
            prop_assert!(gram_residual(&once) < 1e-10);
            let twice = qr_reorthogonalize(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        }
    }

    #[test]
    fn gate_is_monotone(e1 in -5.0f64..5.0, e2 in -5.0f64..5.0, thr in -2.0f64..2.0, alpha in 0.01f64..50.0) {
        let p = gate_probabilities(&[e1, e2], thr, alpha);
        if e1 <= e2 {
            prop_assert!(p[0] <= p[1]);
        } else {
            prop_assert!(p[0] >= p[1]);
        }
    }

    #[test]
    fn masking_probabilities_respect_range_and_monotonicity(
        seed in 0u64..1000,
        rho in 0.0f64..=1.0,
        beta in 0.0f64..0.999,
    ) {
        let n = 12;
        let mut s = RngKey::new(seed).stream();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if s.bernoulli(0.3) {
                    edges.push((i, j));
                }
            }
        }
        let adj = Graph::adjacency_from_edges(n, &edges).unwrap();
        let mut mask = InterventionMask::empty(n);
        for i in 0..n {
            if s.bernoulli(0.4) {
                mask.selected[i] = true;
                mask.probs[i] = 1.0;
            }
        }
        let cfg = ttrf_core::iamae::MaskingConfig { rho, beta, eps: 1e-8 };
        let p = mask_probabilities(&mask, &adj, &cfg);
        let counts: Vec<usize> = (0..n)
            .map(|i| adj.row(i).0.iter().filter(|&&j| mask.is_selected(j)).count())
            .collect();
        for i in 0..n {
            prop_assert!(p[i] >= rho * beta - 1e-15);
            prop_assert!(p[i] < rho + 1e-15);
            if rho > 0.0 && beta < 1.0 {
                prop_assert!(p[i] < rho, "p[{i}] = {} not strictly below rho {rho}", p[i]);
            }
            for j in 0..n {
                if counts[i] <= counts[j] {
                    prop_assert!(p[i] <= p[j] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn sce_is_bounded_and_scale_invariant(seed in 0u64..1000, gamma_ix in 0usize..3, scale in 0.01f64..100.0) {
        let gamma = [1.0, 2.0, 3.0][gamma_ix];
        let mut s = RngKey::new(seed).stream();
        let x = DenseMatrix::filled(5, 4, |_, _| s.normal());
        let z = DenseMatrix::filled(5, 4, |_, _| s.normal());
        let rows: Vec<usize> = (0..5).collect();
        let (loss, _) = ttrf_core::iamae::sce_loss(&x, &z, &rows, gamma).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= 2f64.powf(gamma) + 1e-12);
        let (scaled, _) = ttrf_core::iamae::sce_loss(&x, &z.scale(scale), &rows, gamma).unwrap();
        prop_assert!((loss - scaled).abs() < 1e-9);
    }

    #[test]
    fn normalized_adjacency_is_symmetric(seed in 0u64..1000, n in 2usize..30) {
        let mut s = RngKey::new(seed).stream();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if s.bernoulli(0.2) {
                    edges.push((i, j));
                }
            }
        }
        let adj = Graph::adjacency_from_edges(n, &edges).unwrap();
        let norm = normalize(&adj);
        let dense = norm.csr().to_dense();
        prop_assert!(dense.max_abs_diff(&dense.transpose()) < 1e-12);
        prop_assert!(norm.csr().spectral_radius_estimate(40) <= 1.0 + 1e-9);
    }

    #[test]
    fn orthogonal_shift_preserves_inner_products(seed in 0u64..500) {
        let n = 8;
        let d = 6;
        let mut s = RngKey::new(seed).stream();
        let features = DenseMatrix::filled(n, d, |_, _| s.normal());
        let adj = Graph::adjacency_from_edges(n, &[(0, 1), (2, 3)]).unwrap();
        let g = Graph::new(adj, features, vec![0; n], 1).unwrap();
        let q = haar_orthogonal(d, &mut s);
        let shifted = apply_shift_with(&g, &q).unwrap();
        let gram_before = g.features.matmul(&g.features.transpose()).unwrap();
        let gram_after = shifted.features.matmul(&shifted.features.transpose()).unwrap();
        prop_assert!(gram_before.max_abs_diff(&gram_after) < 1e-9);
    }

    #[test]
    fn predict_proba_rows_are_distributions(seed in 0u64..200) {
        let key = RngKey::new(seed);
        let g = ttrf_core::graph::make_synthetic_sbm(15, 3, 0.3, 0.05, 5, key.child(0)).unwrap();
        let params = GcnParams::init(&[5, 8, 3], key.child(1)).unwrap();
        let bb = FrozenBackbone::new(params, normalize(&g.adj));
        let p = bb.predict_proba(&g.features).unwrap();
        for i in 0..p.rows() {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn adjacency_from_edges_is_clean(edges in edges_strategy(12)) {
        let adj = Graph::adjacency_from_edges(12, &edges).unwrap();
        prop_assert!(adj.is_symmetric());
        for i in 0..12 {
            prop_assert!(!adj.has_entry(i, i));
        }
    }
}
