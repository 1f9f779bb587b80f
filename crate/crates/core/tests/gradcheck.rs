//! Finite-difference validation of every differentiable path: losses,
//! intervention variants, GCN layers, and the reconstruction decoder.
//! Central differences at perturbation 1e-5, relative error below 1e-4,
//! twenty random fixtures per family.

use std::sync::Arc;

use ttrf_core::backbone::{FrozenBackbone, GcnParams};
use ttrf_core::graph::{make_synthetic_sbm, normalize, Graph};
use ttrf_core::iamae::reconstruct_tape;
use ttrf_core::intervention::{make_hook, Intervention, VariantKind};
use ttrf_core::kernel::{DenseMatrix, ParamStore, RngKey, Tape, VarId};
use ttrf_core::selection::InterventionMask;
use ttrf_core::testkit::{finite_diff, rel_err};

const PERTURBATION: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;
const FIXTURES: usize = 20;

/// Rebuilds the loss on a fresh tape from the current parameters, returning
/// the loss node and the leaf ids in parameter order.
type LossBuilder<'a> = dyn Fn(&mut Tape, &[DenseMatrix]) -> (VarId, Vec<VarId>) + 'a;

/// A generic harness: `build` assembles the loss on a fresh tape given the
/// current parameter set, returning the loss node and the leaf ids in
/// parameter order. Checks every parameter's tape gradient against central
/// differences.
fn check_gradients(params: &[DenseMatrix], build: &LossBuilder<'_>, context: &str) {
    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, params);
    let grads = tape.backward(loss).unwrap();
    for (pi, param) in params.iter().enumerate() {
        let eval = |replacement: &DenseMatrix| -> f64 {
            let mut patched: Vec<DenseMatrix> = params.to_vec();
            patched[pi] = replacement.clone();
            let mut tape = Tape::new();
            let (loss, _) = build(&mut tape, &patched);
            tape.value(loss).get(0, 0)
        };
        let fd = finite_diff(param, PERTURBATION, &eval);
        let got = grads
            .of(leaves[pi])
            .unwrap_or_else(|| panic!("{context}: no gradient reached parameter {pi}"));
        let err = rel_err(got, &fd);
        assert!(
            err < MAX_REL_ERR,
            "{context}: parameter {pi} relative error {err:.3e}"
        );
    }
}

#[test]
fn sce_loss_gradients() {
    for f in 0..FIXTURES {
        let key = RngKey::new(1000 + f as u64);
        let mut s = key.stream();
        let rows_n = 3 + f % 4;
        let d = 4 + f % 5;
        let x = Arc::new(DenseMatrix::filled(rows_n + 2, d, |_, _| s.normal()));
        let z = DenseMatrix::filled(rows_n + 2, d, |_, _| s.normal());
        let rows: Arc<[usize]> = Arc::from((0..rows_n).collect::<Vec<_>>());
        let gamma = [1.0, 1.5, 2.0, 3.0][f % 4];
        check_gradients(
            &[z],
            &|tape, params| {
                let zid = tape.leaf(&params[0]);
                let (loss, _) = tape.scaled_cosine_error(&x, zid, &rows, gamma).unwrap();
                (loss, vec![zid])
            },
            &format!("sce fixture {f}"),
        );
    }
}

#[test]
fn entropy_loss_gradients() {
    for f in 0..FIXTURES {
        let key = RngKey::new(2000 + f as u64);
        let mut s = key.stream();
        let n = 4 + f % 5;
        let c = 2 + f % 4;
        let logits = DenseMatrix::filled(n, c, |_, _| 2.0 * s.normal());
        let rows: Arc<[usize]> = Arc::from((0..n).step_by(2).collect::<Vec<_>>());
        check_gradients(
            &[logits],
            &|tape, params| {
                let zid = tape.leaf(&params[0]);
                let loss = tape.mean_entropy(zid, &rows).unwrap();
                (loss, vec![zid])
            },
            &format!("entropy fixture {f}"),
        );
    }
}

/// Smooth scalar readout: sum of squares against a fixed random weighting.
fn quadratic_readout(tape: &mut Tape, value: VarId, weight: &DenseMatrix) -> VarId {
    let w = tape.constant(weight);
    let prod = tape.hadamard(value, w).unwrap();
    let sq = tape.hadamard(prod, prod).unwrap();
    tape.sum_all(sq)
}

fn intervention_gradients(kind: VariantKind, seed_base: u64) {
    for f in 0..FIXTURES {
        let key = RngKey::new(seed_base + f as u64);
        let mut s = key.stream();
        let d = 5 + f % 4;
        let rank = 2 + f % 2;
        let n = 6 + f % 3;
        let iv = Intervention::initialize(kind, rank, &[(1, d)], key.child(7)).unwrap();
        // Perturb every parameter so the transform is away from identity.
        let mut store = ParamStore::new();
        let refs = iv.register_params(&mut store);
        let perturbed: Vec<DenseMatrix> = store
            .refs()
            .map(|r| {
                let v = store.value(r);
                let noise = DenseMatrix::filled(v.rows(), v.cols(), |_, _| 0.3 * s.normal());
                v.add(&noise).unwrap()
            })
            .collect();
        let h = DenseMatrix::filled(n, d, |_, _| s.normal());
        let readout = DenseMatrix::filled(n, d, |_, _| s.normal());
        let rows: Arc<[usize]> = Arc::from(vec![0usize, 2, n - 1]);
        let mask_rows = rows.clone();
        check_gradients(
            &perturbed,
            &|tape, params| {
                // Rebuild the intervention bound to the patched parameters.
                let mut patched_store = ParamStore::new();
                for (r, p) in store.refs().zip(params.iter()) {
                    patched_store.register(store.name(r).to_string(), p.clone());
                }
                let leaves = patched_store.tape_leaves(tape);
                let bound = refs.bind(&leaves);
                let hid = tape.constant(&h);
                let gathered = tape.gather_rows(hid, &mask_rows).unwrap();
                let edited =
                    ttrf_core::intervention::apply_tape(tape, &bound[0].1, gathered).unwrap();
                let scattered = tape.scatter_rows(hid, &mask_rows, edited).unwrap();
                let loss = quadratic_readout(tape, scattered, &readout);
                (loss, leaves)
            },
            &format!("{} fixture {f}", kind.name()),
        );
    }
}

#[test]
fn loreft_intervention_gradients() {
    intervention_gradients(VariantKind::LoReft, 3000);
}

#[test]
fn direft_intervention_gradients() {
    intervention_gradients(VariantKind::DiReft, 4000);
}

#[test]
fn uv_intervention_gradients() {
    intervention_gradients(VariantKind::Uv, 5000);
}

/// Random small graph whose hidden pre-activations stay clear of the ReLU
/// kink, so finite differences are valid.
fn gcn_fixture(seed: u64) -> (Graph, GcnParams, Vec<usize>) {
    for attempt in 0..50 {
        let key = RngKey::new(seed + 977 * attempt);
        let n = 8;
        let g = make_synthetic_sbm(n, 2, 0.4, 0.1, 4, key.child(0)).unwrap();
        let params = GcnParams::init(&[4, 6, 2], key.child(1)).unwrap();
        // Probe the hidden pre-activation margin.
        let norm = normalize(&g.adj);
        let h = norm.csr().matmul_dense(&g.features).unwrap();
        let pre = h.matmul(&params.weights[0]).unwrap();
        let margin = pre.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin > 1e-3 {
            let labels = g.labels.clone();
            return (g, params, labels);
        }
    }
    panic!("no ReLU-safe fixture found");
}

#[test]
fn gcn_layer_gradients() {
    for f in 0..FIXTURES {
        let (g, params, labels) = gcn_fixture(6000 + f as u64);
        let norm = normalize(&g.adj);
        let labels: Arc<[usize]> = Arc::from(labels);
        let rows: Arc<[usize]> = Arc::from((0..g.n()).collect::<Vec<_>>());
        let flat = vec![
            params.weights[0].clone(),
            params.biases[0].clone(),
            params.weights[1].clone(),
            params.biases[1].clone(),
        ];
        let features = g.features.clone();
        check_gradients(
            &flat,
            &|tape, p| {
                let w1 = tape.leaf(&p[0]);
                let b1 = tape.leaf(&p[1]);
                let w2 = tape.leaf(&p[2]);
                let b2 = tape.leaf(&p[3]);
                let x = tape.constant(&features);
                let trace = ttrf_core::backbone::gcn_forward_tape(
                    tape,
                    &norm,
                    &[w1, w2],
                    &[b1, b2],
                    x,
                    None,
                )
                .unwrap();
                let loss = tape.mean_cross_entropy(trace.logits, &labels, &rows).unwrap();
                (loss, vec![w1, b1, w2, b2])
            },
            &format!("gcn fixture {f}"),
        );
    }
}

#[test]
fn decoder_and_token_gradients() {
    for f in 0..FIXTURES {
        let (g, params, _) = gcn_fixture(7000 + f as u64);
        let norm = normalize(&g.adj);
        let bb = FrozenBackbone::new(params, norm);
        let key = RngKey::new(7500 + f as u64);
        let mut s = key.stream();
        let hidden_dim = bb.layer_dim(1);
        let dec_w = DenseMatrix::filled(hidden_dim, g.feature_dim(), |_, _| 0.5 * s.normal());
        let dec_b = DenseMatrix::filled(1, g.feature_dim(), |_, _| 0.1 * s.normal());
        let mask_token = DenseMatrix::filled(1, g.feature_dim(), |_, _| 0.2 * s.normal());
        let remask_token = DenseMatrix::filled(1, hidden_dim, |_, _| 0.2 * s.normal());
        let masked_rows: Arc<[usize]> = Arc::from(vec![1usize, 4, 6]);
        let target = Arc::new(g.features.clone());
        let features = g.features.clone();
        let gamma = 2.0;
        check_gradients(
            &[dec_w, dec_b, mask_token, remask_token],
            &|tape, p| {
                let dec_w = tape.leaf(&p[0]);
                let dec_b = tape.leaf(&p[1]);
                let mask_token = tape.leaf(&p[2]);
                let remask_token = tape.leaf(&p[3]);
                let x = tape.constant(&features);
                let x_masked = tape.mask_rows_with_token(x, mask_token, &masked_rows).unwrap();
                let z = reconstruct_tape(
                    tape,
                    &bb,
                    None,
                    x_masked,
                    &masked_rows,
                    remask_token,
                    dec_w,
                    dec_b,
                )
                .unwrap();
                let (loss, _) = tape.scaled_cosine_error(&target, z, &masked_rows, gamma).unwrap();
                (loss, vec![dec_w, dec_b, mask_token, remask_token])
            },
            &format!("decoder fixture {f}"),
        );
    }
}

/// Gradient-flow partition: the self-supervised loss reaches intervention
/// parameters but never the backbone.
#[test]
fn gradient_partition_between_intervention_and_backbone() {
    let (g, params, _) = gcn_fixture(8000);
    let norm = normalize(&g.adj);
    let bb = FrozenBackbone::new(params, norm);
    let key = RngKey::new(8100);
    let iv = Intervention::initialize(VariantKind::LoReft, 2, &[(1, bb.layer_dim(1))], key).unwrap();
    let mut store = ParamStore::new();
    let refs = iv.register_params(&mut store);
    // Perturb the projection so the intervention is non-identity.
    let proj_ref = store.refs().nth(1).unwrap();
    let mut s = key.stream();
    let bumped = {
        let v = store.value(proj_ref);
        let noise = DenseMatrix::filled(v.rows(), v.cols(), |_, _| 0.5 * s.normal());
        v.add(&noise).unwrap()
    };
    store.set_value(proj_ref, bumped);

    let mut selected = InterventionMask::empty(g.n());
    for i in [0usize, 3, 5] {
        selected.selected[i] = true;
        selected.probs[i] = 1.0;
    }

    let mut tape = Tape::new();
    let leaves = store.tape_leaves(&mut tape);
    let bound = refs.bind(&leaves);
    let mut hook = make_hook(bound, &selected);
    let x = tape.constant(&g.features);
    let trace = bb.forward_tape(&mut tape, x, Some(&mut hook)).unwrap();
    let rows: Arc<[usize]> = Arc::from(vec![5usize, 6, 7]);
    let loss = tape.mean_entropy(trace.logits, &rows).unwrap();
    // Add reconstruction so both objective parts are present.
    let grads = tape.backward(loss).unwrap();
    let phi_grad_norm: f64 = leaves
        .iter()
        .filter_map(|&l| grads.of(l))
        .map(|g| g.frob_norm())
        .sum();
    assert!(phi_grad_norm > 1e-10, "intervention gradient vanished");
    assert!(grads.of(x).is_none(), "gradient reached a constant leaf");
}
