//! GCN and SGC backbones: supervised pretraining, a frozen snapshot with a
//! content fingerprint, and per-layer representation capture for hooks.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::graph::{Graph, NormalizedAdjacency, SplitMasks};
use crate::kernel::{
    softmax_rows, AdamState, DenseMatrix, KernelError, ParamStore, RngKey, Tape, VarId,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("train mask selects no nodes")]
    EmptyTrainMask,

    #[error("architecture: {0}")]
    BadArchitecture(String),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Layer weights and biases of a K-layer GCN. Layer `l` maps dimension
/// `dims[l]` to `dims[l+1]`, with ReLU between layers and none after the last.
#[derive(Debug, Clone)]
pub struct GcnParams {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

impl GcnParams {
    /// Glorot-uniform initialization over the dimension chain.
    pub fn init(dims: &[usize], key: RngKey) -> Result<Self, TrainError> {
        if dims.len() < 2 {
            return Err(TrainError::BadArchitecture("need at least one layer".into()));
        }
        if dims.contains(&0) {
            return Err(TrainError::BadArchitecture("zero-width layer".into()));
        }
        let mut stream = key.stream();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DenseMatrix::filled(fan_in, fan_out, |_, _| {
                stream.uniform_in(-bound, bound)
            }));
            biases.push(DenseMatrix::zeros(1, fan_out));
        }
        Ok(GcnParams { weights, biases })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// `[d_in, d_1, ..., d_K]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].rows()];
        dims.extend(self.weights.iter().map(|w| w.cols()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(DenseMatrix::len).sum::<usize>()
            + self.biases.iter().map(DenseMatrix::len).sum::<usize>()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_usize(self.num_layers());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            h.write_usize(w.rows());
            h.write_usize(w.cols());
            for v in w.data() {
                h.write_u64(v.to_bits());
            }
            for v in b.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// FNV-1a over parameter bit patterns; any drift changes the digest.
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Per-layer representations `h^(0) .. h^(K)`; index 0 is the input features.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub layers: Vec<DenseMatrix>,
}

/// A pretrained GCN whose parameters never change after construction. The
/// fingerprint can be recomputed on demand so any drift is detectable.
#[derive(Clone)]
pub struct FrozenBackbone {
    params: GcnParams,
    norm_adj: NormalizedAdjacency,
    fingerprint: u64,
}

/// Per-layer post-activation transform inserted between a layer's output and
/// the next propagation step. Receives the 1-based layer index (layer K is
/// the logit layer) and must return a tape node of the same shape.
pub type Hook<'a> = dyn FnMut(&mut Tape, usize, VarId) -> Result<VarId, KernelError> + 'a;

/// Tape handles returned by a forward pass.
pub struct ForwardTrace {
    pub logits: VarId,
    /// `h^(0) .. h^(K)` after hooks.
    pub activations: Vec<VarId>,
}

/// Shared forward pass over explicit weight/bias tape nodes, used both for
/// pretraining (trainable leaves) and frozen inference (constants).
pub fn gcn_forward_tape(
    tape: &mut Tape,
    norm_adj: &NormalizedAdjacency,
    weights: &[VarId],
    biases: &[VarId],
    x: VarId,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<ForwardTrace, KernelError> {
    let k = weights.len();
    let mut h = x;
    let mut activations = vec![x];
    for l in 0..k {
        let propagated = tape.spmm(norm_adj.csr(), h)?;
        let projected = tape.matmul(propagated, weights[l])?;
        let with_bias = tape.add_row_broadcast(projected, biases[l])?;
        h = if l + 1 < k { tape.relu(with_bias) } else { with_bias };
        if let Some(hook) = hook.as_deref_mut() {
            let shape = tape.value(h).shape();
            let hooked = hook(tape, l + 1, h)?;
            if tape.value(hooked).shape() != shape {
                return Err(KernelError::ShapeMismatch {
                    op: "forward_hook",
                    detail: format!(
                        "layer {}: hook returned {:?}, expected {:?}",
                        l + 1,
                        tape.value(hooked).shape(),
                        shape
                    ),
                });
            }
            h = hooked;
        }
        activations.push(h);
    }
    Ok(ForwardTrace { logits: h, activations })
}

impl FrozenBackbone {
    pub fn new(params: GcnParams, norm_adj: NormalizedAdjacency) -> Self {
        let fingerprint = params.fingerprint();
        FrozenBackbone { params, norm_adj, fingerprint }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Recompute the parameter hash and compare against the stored one.
    pub fn verify_fingerprint(&self) -> bool {
        self.params.fingerprint() == self.fingerprint
    }

    pub fn params(&self) -> &GcnParams {
        &self.params
    }

    pub fn norm_adj(&self) -> &NormalizedAdjacency {
        &self.norm_adj
    }

    pub fn num_layers(&self) -> usize {
        self.params.num_layers()
    }

    pub fn input_dim(&self) -> usize {
        self.params.weights[0].rows()
    }

    pub fn num_classes(&self) -> usize {
        self.params.weights.last().unwrap().cols()
    }

    /// Output dimension of layer `l` (1-based).
    pub fn layer_dim(&self, l: usize) -> usize {
        self.params.weights[l - 1].cols()
    }

    /// Forward pass on an existing tape with the backbone parameters
    /// registered as constants: gradients never reach them.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: VarId,
        hook: Option<&mut Hook<'_>>,
    ) -> Result<ForwardTrace, KernelError> {
        let weights: Vec<VarId> = self.params.weights.iter().map(|w| tape.constant(w)).collect();
        let biases: Vec<VarId> = self.params.biases.iter().map(|b| tape.constant(b)).collect();
        gcn_forward_tape(tape, &self.norm_adj, &weights, &biases, x, hook)
    }

    /// Plain forward pass; a throwaway tape keeps the numerics identical to
    /// the training path.
    pub fn forward(
        &self,
        x: &DenseMatrix,
        hook: Option<&mut Hook<'_>>,
    ) -> Result<(DenseMatrix, LayerActivations), KernelError> {
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let trace = self.forward_tape(&mut tape, xid, hook)?;
        let layers = trace
            .activations
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect();
        Ok((tape.value(trace.logits).clone(), LayerActivations { layers }))
    }

    /// Row-wise class probabilities of the hook-free forward pass.
    pub fn predict_proba(&self, x: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
        let (logits, _) = self.forward(x, None)?;
        Ok(softmax_rows(&logits))
    }
}

/// Fraction of `rows` whose argmax prediction matches the label.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let pred = logits.argmax_rows();
    let correct = rows.iter().filter(|&&r| pred[r] == labels[r]).count();
    correct as f64 / rows.len() as f64
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { hidden_dim: 64, num_layers: 2, lr: 0.01, max_epochs: 500, patience: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Supervised pretraining with Adam and early stopping on validation
/// accuracy. Returns the best-validation snapshot, frozen and fingerprinted.
pub fn pretrain(
    g: &Graph,
    masks: &SplitMasks,
    cfg: &PretrainConfig,
    key: RngKey,
) -> Result<(FrozenBackbone, Vec<TrainLogEntry>), TrainError> {
    let train_rows: std::sync::Arc<[usize]> = std::sync::Arc::from(masks.train_indices());
    if train_rows.is_empty() {
        return Err(TrainError::EmptyTrainMask);
    }
    let val_rows = masks.val_indices();
    let labels: std::sync::Arc<[usize]> = std::sync::Arc::from(g.labels.clone());

    let mut dims = vec![g.feature_dim()];
    dims.extend(std::iter::repeat_n(cfg.hidden_dim, cfg.num_layers.saturating_sub(1)));
    dims.push(g.num_classes);
    let init = GcnParams::init(&dims, key.child(0))?;

    let norm_adj = crate::graph::normalize(&g.adj);
    let mut store = ParamStore::new();
    let mut weight_refs = Vec::new();
    let mut bias_refs = Vec::new();
    for (l, (w, b)) in init.weights.iter().zip(&init.biases).enumerate() {
        weight_refs.push(store.register(format!("w{l}"), w.clone()));
        bias_refs.push(store.register(format!("b{l}"), b.clone()));
    }

    let snapshot = |store: &ParamStore| -> GcnParams {
        GcnParams {
            weights: weight_refs.iter().map(|&r| store.value(r).clone()).collect(),
            biases: bias_refs.iter().map(|&r| store.value(r).clone()).collect(),
        }
    };
    let eval_val = |params: &GcnParams| -> Result<f64, TrainError> {
        if val_rows.is_empty() {
            return Ok(0.0);
        }
        let bb = FrozenBackbone::new(params.clone(), norm_adj.clone());
        let (logits, _) = bb.forward(&g.features, None)?;
        Ok(accuracy(&logits, &g.labels, &val_rows))
    };

    let mut adam = AdamState::new();
    let mut log = Vec::new();
    let mut best_params = snapshot(&store);
    let mut best_val = eval_val(&best_params)?;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut tape = Tape::new();
        let leaves = store.tape_leaves(&mut tape);
        let weights: Vec<VarId> = (0..weight_refs.len()).map(|l| leaves[2 * l]).collect();
        let biases: Vec<VarId> = (0..bias_refs.len()).map(|l| leaves[2 * l + 1]).collect();
        let x = tape.constant(&g.features);
        let trace = gcn_forward_tape(&mut tape, &norm_adj, &weights, &biases, x, None)?;
        let loss_id = tape.mean_cross_entropy(trace.logits, &labels, &train_rows)?;
        let loss = tape.value(loss_id).get(0, 0);
        if !loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss });
        }
        let grads = tape.backward(loss_id)?;
        adam.step(&mut store, &leaves, &grads, cfg.lr)?;

        let current = snapshot(&store);
        let val_acc = eval_val(&current)?;
        log.push(TrainLogEntry { epoch, loss, val_accuracy: val_acc });
        if val_acc > best_val {
            best_val = val_acc;
            best_params = current;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    Ok((FrozenBackbone::new(best_params, norm_adj), log))
}

/// Simplified graph convolution `softmax(A^K X W)`: no bias, no
/// nonlinearity. `k = 0` degenerates to `softmax(X W)`.
pub fn sgc_forward(
    norm_adj: &NormalizedAdjacency,
    x: &DenseMatrix,
    w: &DenseMatrix,
    k: usize,
) -> Result<DenseMatrix, KernelError> {
    let mut h = x.clone();
    for _ in 0..k {
        h = norm_adj.csr().matmul_dense(&h)?;
    }
    Ok(softmax_rows(&h.matmul(w)?))
}

// ---------------------------------------------------------------------------
// Checkpoint format: versioned text container with hex-encoded f64 payloads.
// ---------------------------------------------------------------------------

const BACKBONE_MAGIC: &str = "gcn-backbone v1";

pub fn save_backbone(path: &Path, bb: &FrozenBackbone) -> Result<(), TrainError> {
    let params = bb.params();
    let mut out = String::new();
    let _ = writeln!(out, "{BACKBONE_MAGIC}");
    let _ = writeln!(out, "fingerprint {:016x}", bb.fingerprint());
    let _ = writeln!(out, "layers {}", params.num_layers());
    for (w, b) in params.weights.iter().zip(&params.biases) {
        let _ = writeln!(out, "layer {} {}", w.rows(), w.cols());
        write_hex_matrix(&mut out, w);
        write_hex_matrix(&mut out, b);
    }
    std::fs::write(path, out).map_err(|e| TrainError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Load a backbone checkpoint and bind it to the given graph's normalized
/// adjacency. Fails if the stored fingerprint does not match the payload.
pub fn load_backbone(path: &Path, g: &Graph) -> Result<FrozenBackbone, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let ck_err = |msg: String| TrainError::Checkpoint { path: path.display().to_string(), msg };
    let mut lines = text.lines();
    if lines.next() != Some(BACKBONE_MAGIC) {
        return Err(ck_err("not a backbone checkpoint (bad magic)".into()));
    }
    let fp_line = lines.next().ok_or_else(|| ck_err("missing fingerprint".into()))?;
    let stored_fp = fp_line
        .strip_prefix("fingerprint ")
        .ok_or_else(|| ck_err("bad fingerprint line".into()))
        .and_then(|t| u64::from_str_radix(t, 16).map_err(|e| ck_err(format!("bad fingerprint: {e}"))))?;
    let layers_line = lines.next().ok_or_else(|| ck_err("missing layers line".into()))?;
    let k: usize = layers_line
        .strip_prefix("layers ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ck_err("bad layers line".into()))?;
    let mut weights = Vec::with_capacity(k);
    let mut biases = Vec::with_capacity(k);
    for _ in 0..k {
        let header = lines.next().ok_or_else(|| ck_err("truncated layer header".into()))?;
        let mut it = header
            .strip_prefix("layer ")
            .ok_or_else(|| ck_err("bad layer header".into()))?
            .split_whitespace();
        let rows: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ck_err("bad layer rows".into()))?;
        let cols: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ck_err("bad layer cols".into()))?;
        weights.push(read_hex_matrix(&mut lines, rows, cols).map_err(&ck_err)?);
        biases.push(read_hex_matrix(&mut lines, 1, cols).map_err(&ck_err)?);
    }
    let params = GcnParams { weights, biases };
    if params.fingerprint() != stored_fp {
        return Err(ck_err("fingerprint mismatch: checkpoint payload corrupted".into()));
    }
    if params.weights[0].rows() != g.feature_dim() {
        return Err(ck_err(format!(
            "checkpoint input dim {} does not match graph feature dim {}",
            params.weights[0].rows(),
            g.feature_dim()
        )));
    }
    let norm_adj = crate::graph::normalize(&g.adj);
    Ok(FrozenBackbone::new(params, norm_adj))
}

pub(crate) fn write_hex_matrix(out: &mut String, m: &DenseMatrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

pub(crate) fn read_hex_matrix<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix, String> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines.next().ok_or_else(|| "truncated matrix payload".to_string())?;
        for tok in line.split_whitespace() {
            let bits = u64::from_str_radix(tok, 16).map_err(|e| format!("bad hex f64: {e}"))?;
            data.push(f64::from_bits(bits));
        }
    }
    if data.len() != rows * cols {
        return Err(format!("expected {} values, got {}", rows * cols, data.len()));
    }
    DenseMatrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{make_synthetic_sbm, normalize};

    fn tiny_graph() -> Graph {
        let adj = Graph::adjacency_from_edges(1, &[]).unwrap();
        Graph::new(adj, DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap(), vec![0], 2).unwrap()
    }

    #[test]
    fn one_layer_forward_matches_hand_computation() {
        // Single isolated node: normalized adjacency is the 1x1 identity, so
        // logits = x W + b.
        let g = tiny_graph();
        let norm = normalize(&g.adj);
        let w = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let b = DenseMatrix::row_vector(vec![0.25, -0.5]).unwrap();
        let params = GcnParams { weights: vec![w], biases: vec![b] };
        let bb = FrozenBackbone::new(params, norm);
        let (logits, acts) = bb.forward(&g.features, None).unwrap();
        assert!((logits.get(0, 0) - (1.0 + 1.0 + 0.25)).abs() < 1e-12);
        assert!((logits.get(0, 1) - (-1.0 + 4.0 - 0.5)).abs() < 1e-12);
        assert_eq!(acts.layers.len(), 2);
    }

    #[test]
    fn identity_hook_is_bit_identical_to_no_hook() {
        let g = make_synthetic_sbm(30, 3, 0.3, 0.05, 6, RngKey::new(1)).unwrap();
        let norm = normalize(&g.adj);
        let params = GcnParams::init(&[6, 8, 3], RngKey::new(2)).unwrap();
        let bb = FrozenBackbone::new(params, norm);
        let (plain, _) = bb.forward(&g.features, None).unwrap();
        let mut identity = |_t: &mut Tape, _l: usize, h: VarId| Ok(h);
        let (hooked, _) = bb.forward(&g.features, Some(&mut identity)).unwrap();
        assert!(plain.bits_eq(&hooked));
    }

    #[test]
    fn doubling_hook_on_linear_regime_doubles_logits() {
        // All-positive weights, biases, and features keep every
        // pre-activation positive, so ReLU acts linearly and scaling h^(1)
        // by 2 scales the logits by exactly 2.
        let g = make_synthetic_sbm(20, 2, 0.4, 0.1, 4, RngKey::new(3)).unwrap();
        let norm = normalize(&g.adj);
        let mut stream = RngKey::new(4).stream();
        let w1 = DenseMatrix::filled(4, 5, |_, _| stream.uniform_in(0.1, 0.5));
        let w2 = DenseMatrix::filled(5, 2, |_, _| stream.uniform_in(0.1, 0.5));
        let params = GcnParams {
            weights: vec![w1, w2],
            biases: vec![DenseMatrix::zeros(1, 5), DenseMatrix::zeros(1, 2)],
        };
        let positive_features = DenseMatrix::filled(20, 4, |_, _| stream.uniform_in(0.1, 1.0));
        let bb = FrozenBackbone::new(params, norm);
        let (plain, _) = bb.forward(&positive_features, None).unwrap();
        let mut doubler =
            |t: &mut Tape, l: usize, h: VarId| Ok(if l == 1 { t.scale(h, 2.0) } else { h });
        let (hooked, _) = bb.forward(&positive_features, Some(&mut doubler)).unwrap();
        assert!(hooked.max_abs_diff(&plain.scale(2.0)) < 1e-9);
    }

    #[test]
    fn hook_shape_mismatch_is_contract_error() {
        let g = tiny_graph();
        let norm = normalize(&g.adj);
        let params = GcnParams::init(&[2, 3, 2], RngKey::new(5)).unwrap();
        let bb = FrozenBackbone::new(params, norm);
        let mut bad = |t: &mut Tape, _l: usize, h: VarId| {
            let widened = t.value(h).transpose();
            Ok(t.constant(&widened))
        };
        assert!(bb.forward(&g.features, Some(&mut bad)).is_err());
    }

    #[test]
    fn predict_proba_rows_are_distributions() {
        let g = make_synthetic_sbm(25, 4, 0.3, 0.05, 8, RngKey::new(6)).unwrap();
        let bb = FrozenBackbone::new(
            GcnParams::init(&[8, 16, 4], RngKey::new(7)).unwrap(),
            normalize(&g.adj),
        );
        let p = bb.predict_proba(&g.features).unwrap();
        for i in 0..p.rows() {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn sgc_degenerate_and_composed_cases() {
        let g = make_synthetic_sbm(15, 3, 0.4, 0.1, 5, RngKey::new(8)).unwrap();
        let norm = normalize(&g.adj);
        let mut s = RngKey::new(9).stream();
        let w = DenseMatrix::filled(5, 3, |_, _| s.normal());
        // K = 0: softmax(X W).
        let k0 = sgc_forward(&norm, &g.features, &w, 0).unwrap();
        let direct = softmax_rows(&g.features.matmul(&w).unwrap());
        assert!(k0.max_abs_diff(&direct) < 1e-15);
        // K = 1 over an edgeless graph: normalized adjacency is the identity.
        let iso = Graph::adjacency_from_edges(15, &[]).unwrap();
        let norm_iso = normalize(&iso);
        let k1 = sgc_forward(&norm_iso, &g.features, &w, 1).unwrap();
        assert!(k1.max_abs_diff(&direct) < 1e-14);
        // K = 2 equals two explicit propagations then the dense product.
        let k2 = sgc_forward(&norm, &g.features, &w, 2).unwrap();
        let h = norm.csr().matmul_dense(&g.features).unwrap();
        let h = norm.csr().matmul_dense(&h).unwrap();
        let expect = softmax_rows(&h.matmul(&w).unwrap());
        assert!(k2.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn pretrain_fits_separable_sbm() {
        let g = make_synthetic_sbm(80, 2, 0.5, 0.01, 4, RngKey::new(10)).unwrap();
        let train: Vec<usize> = (0..60).collect();
        let val: Vec<usize> = (60..70).collect();
        let test: Vec<usize> = (70..80).collect();
        let masks = SplitMasks::from_indices(80, &train, &val, &test).unwrap();
        let cfg = PretrainConfig { max_epochs: 200, ..Default::default() };
        let (bb, log) = pretrain(&g, &masks, &cfg, RngKey::new(11)).unwrap();
        let (logits, _) = bb.forward(&g.features, None).unwrap();
        let acc = accuracy(&logits, &g.labels, &train);
        assert!(acc > 0.95, "train accuracy {acc} after {} epochs", log.len());
    }

    #[test]
    fn zero_epochs_returns_chance_level_backbone() {
        // A single random init can map the class structure onto an arbitrary
        // bucket assignment (well above or below 1/C), so chance level is a
        // statement about the mean over inits.
        let g = make_synthetic_sbm(120, 4, 0.2, 0.02, 8, RngKey::new(12)).unwrap();
        let train: Vec<usize> = (0..80).collect();
        let val: Vec<usize> = (80..100).collect();
        let test: Vec<usize> = (100..120).collect();
        let masks = SplitMasks::from_indices(120, &train, &val, &test).unwrap();
        let cfg = PretrainConfig { max_epochs: 0, ..Default::default() };
        let mut total = 0.0;
        let seeds = 16;
        for s in 0..seeds {
            let (bb, _) = pretrain(&g, &masks, &cfg, RngKey::new(100 + s)).unwrap();
            let (logits, _) = bb.forward(&g.features, None).unwrap();
            total += accuracy(&logits, &g.labels, &masks.val_indices());
        }
        let mean = total / seeds as f64;
        assert!((mean - 0.25).abs() <= 0.15, "mean val accuracy {mean} not near chance");
    }

    #[test]
    fn same_seed_gives_identical_fingerprints() {
        let g = make_synthetic_sbm(50, 2, 0.3, 0.05, 6, RngKey::new(14)).unwrap();
        let train: Vec<usize> = (0..30).collect();
        let val: Vec<usize> = (30..40).collect();
        let test: Vec<usize> = (40..50).collect();
        let masks = SplitMasks::from_indices(50, &train, &val, &test).unwrap();
        let cfg = PretrainConfig { max_epochs: 30, ..Default::default() };
        let (a, _) = pretrain(&g, &masks, &cfg, RngKey::new(15)).unwrap();
        let (b, _) = pretrain(&g, &masks, &cfg, RngKey::new(15)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let (c, _) = pretrain(&g, &masks, &cfg, RngKey::new(16)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn checkpoint_round_trip_preserves_fingerprint() {
        let g = make_synthetic_sbm(40, 2, 0.3, 0.05, 6, RngKey::new(17)).unwrap();
        let train: Vec<usize> = (0..25).collect();
        let val: Vec<usize> = (25..32).collect();
        let test: Vec<usize> = (32..40).collect();
        let masks = SplitMasks::from_indices(40, &train, &val, &test).unwrap();
        let cfg = PretrainConfig { max_epochs: 10, ..Default::default() };
        let (bb, _) = pretrain(&g, &masks, &cfg, RngKey::new(18)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        save_backbone(&path, &bb).unwrap();
        let loaded = load_backbone(&path, &g).unwrap();
        assert_eq!(loaded.fingerprint(), bb.fingerprint());
        assert!(loaded.verify_fingerprint());
    }
}
