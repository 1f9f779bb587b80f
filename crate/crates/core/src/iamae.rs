//! Intervention-aware masked autoencoding and the test-time adaptation loop.
//!
//! Masking probabilities grow with a node's count of intervened neighbors,
//! masked features are replaced by a learnable token, the frozen backbone
//! (plus hooks) encodes, representations are re-masked and decoded by a
//! single trainable GCN layer, and the reconstruction is scored by a scaled
//! cosine error. The adaptation loop optimizes intervention, decoder, and
//! token parameters with Adam while the backbone stays frozen, retracting the
//! subspace basis after every step.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{accuracy, FrozenBackbone, Hook};
use crate::graph::{Graph, SplitMasks};
use crate::intervention::{
    make_frozen_hook, make_hook, Intervention, InterventionError, InterventionRefs,
};
use crate::kernel::{
    softmax_rows, AdamState, DenseMatrix, KernelError, ParamRef, ParamStore, RngKey, RngStream,
    SparseAdjacency, Tape, VarId,
};
use crate::selection::{
    gate_probabilities, median_entropy, predictive_entropy, sample_mask, InterventionMask,
    SelectionConfig,
};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("adaptation diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64, report: Box<AdaptReport> },

    #[error("test mask selects no nodes")]
    EmptyTestMask,

    #[error("frozen backbone fingerprint drifted during adaptation")]
    FingerprintDrift,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error(transparent)]
    Intervention(#[from] InterventionError),
}

/// Density-coupled masking parameters.
#[derive(Debug, Clone, Copy)]
pub struct MaskingConfig {
    /// Global masking rate.
    pub rho: f64,
    /// Base rate for nodes with no intervened neighbors.
    pub beta: f64,
    /// Stability constant in the density ratio.
    pub eps: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { rho: 0.5, beta: 0.5, eps: 1e-8 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("rho", self.rho), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.eps <= 0.0 {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Self-supervised objective and loop parameters.
#[derive(Debug, Clone, Copy)]
pub struct SslConfig {
    /// Cosine error exponent (>= 1); larger focuses on badly reconstructed rows.
    pub gamma: f64,
    /// Entropy regularizer weight.
    pub lambda_entropy: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Resample the intervention target set every epoch instead of fixing it
    /// once per run.
    pub resample_targets: bool,
    /// Score the entropy term on the deployed (gated) predictive
    /// distribution: non-selected test nodes contribute their clean-forward
    /// entropy as a constant, so the gradient flows only through nodes whose
    /// predictions the intervention actually changes at inference. Disable
    /// when inference propagates edits to neighbors.
    pub gated_entropy: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            gamma: 2.0,
            lambda_entropy: 0.1,
            epochs: 100,
            lr: 0.01,
            resample_targets: false,
            gated_entropy: true,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.gamma < 1.0 {
            return Err(format!("gamma must be >= 1, got {}", self.gamma));
        }
        if self.lambda_entropy < 0.0 {
            return Err(format!("lambda_entropy must be >= 0, got {}", self.lambda_entropy));
        }
        if self.lr <= 0.0 {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Single GCN layer mapping hidden representations back to input features.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Decoder {
    pub fn init(hidden_dim: usize, out_dim: usize, key: RngKey) -> Self {
        let mut stream = key.stream();
        let bound = (6.0 / (hidden_dim + out_dim) as f64).sqrt();
        Decoder {
            weight: DenseMatrix::filled(hidden_dim, out_dim, |_, _| stream.uniform_in(-bound, bound)),
            bias: DenseMatrix::zeros(1, out_dim),
        }
    }
}

/// Per-epoch record of the adaptation run.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_reconstruction: f64,
    pub loss_entropy: f64,
    pub loss_total: f64,
    pub masked_count: usize,
    pub selected_count: usize,
    pub ortho_residual: f64,
    pub sce_skipped: usize,
}

/// Full adaptation report: epoch records, best-snapshot bookkeeping, and the
/// target set actually used.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    pub selected: Vec<usize>,
    pub entropy_threshold: f64,
    pub fingerprint_verified: bool,
}

impl AdaptReport {
    /// One JSON object per epoch line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("epoch records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Per-node masking probabilities coupled to the local intervention density:
/// `rho * (beta + (1 - beta) * C_i / (max_k C_k + eps))`, where `C_i` counts
/// intervened neighbors in the raw adjacency (no self-loop, so a node's own
/// status does not contribute).
pub fn mask_probabilities(
    mask: &InterventionMask,
    adj: &SparseAdjacency,
    cfg: &MaskingConfig,
) -> Vec<f64> {
    let n = adj.n();
    let counts: Vec<f64> = (0..n)
        .map(|i| {
            let (idx, _) = adj.row(i);
            idx.iter().filter(|&&j| mask.is_selected(j)).count() as f64
        })
        .collect();
    let max_count = counts.iter().fold(0.0f64, |m, &c| m.max(c));
    counts
        .iter()
        .map(|&c| cfg.rho * (cfg.beta + (1.0 - cfg.beta) * c / (max_count + cfg.eps)))
        .collect()
}

/// Draw the masked node set: one Bernoulli per node in index order.
pub fn sample_masked_set(p_mask: &[f64], stream: &mut RngStream) -> Vec<usize> {
    (0..p_mask.len()).filter(|&i| stream.bernoulli(p_mask[i])).collect()
}

/// Replace sampled rows of `x` by the token; unmasked rows are bit-identical.
/// Returns the masked matrix and the masked node set.
pub fn mask_features(
    x: &DenseMatrix,
    p_mask: &[f64],
    token: &DenseMatrix,
    key: RngKey,
) -> Result<(DenseMatrix, Vec<usize>), KernelError> {
    let mut stream = key.stream();
    let masked_set = sample_masked_set(p_mask, &mut stream);
    let mut tape = Tape::new();
    let xid = tape.constant(x);
    let tid = tape.constant(token);
    let rows: Arc<[usize]> = Arc::from(masked_set.clone());
    let out = tape.mask_rows_with_token(xid, tid, &rows)?;
    Ok((tape.value(out).clone(), masked_set))
}

/// Scaled cosine error between original and reconstructed rows over the
/// masked set; returns the loss and the number of degenerate (zero-norm)
/// rows excluded from the average.
pub fn sce_loss(
    x: &DenseMatrix,
    z: &DenseMatrix,
    masked: &[usize],
    gamma: f64,
) -> Result<(f64, usize), KernelError> {
    let mut tape = Tape::new();
    let zid = tape.constant(z);
    let target = Arc::new(x.clone());
    let rows: Arc<[usize]> = Arc::from(masked.to_vec());
    let (loss, skipped) = tape.scaled_cosine_error(&target, zid, &rows, gamma)?;
    Ok((tape.value(loss).get(0, 0), skipped))
}

/// Mean predictive entropy of probability rows restricted to `rows`.
pub fn entropy_loss(proba: &DenseMatrix, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let all = predictive_entropy(proba);
    rows.iter().map(|&r| all[r]).sum::<f64>() / rows.len() as f64
}

/// Reconstruction pass used by the adaptation loop, exposed for gradient
/// checking: encode masked features through the hooked frozen backbone, take
/// the last hidden layer, re-mask it with a token, decode with one GCN layer.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_tape(
    tape: &mut Tape,
    bb: &FrozenBackbone,
    hook: Option<&mut Hook<'_>>,
    x_masked: VarId,
    masked_rows: &Arc<[usize]>,
    remask_token: VarId,
    dec_weight: VarId,
    dec_bias: VarId,
) -> Result<VarId, KernelError> {
    let trace = bb.forward_tape(tape, x_masked, hook)?;
    // Last hidden layer: input features when the net has a single layer.
    let hidden = trace.activations[bb.num_layers() - 1];
    let remasked = tape.mask_rows_with_token(hidden, remask_token, masked_rows)?;
    let propagated = tape.spmm(bb.norm_adj().csr(), remasked)?;
    let projected = tape.matmul(propagated, dec_weight)?;
    tape.add_row_broadcast(projected, dec_bias)
}

/// Inference rule for combining the frozen model with learned interventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Two forward passes: hooked logits for selected nodes, clean logits for
    /// everyone else. Non-selected predictions are bit-identical to the
    /// frozen baseline.
    GatedDualPass,
    /// One hooked pass; edits propagate to neighbors through later layers.
    Propagating,
}

impl InferenceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gated_dual_pass" => Some(InferenceMode::GatedDualPass),
            "propagating" => Some(InferenceMode::Propagating),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::GatedDualPass => "gated_dual_pass",
            InferenceMode::Propagating => "propagating",
        }
    }
}

pub struct InferenceResult {
    pub logits: DenseMatrix,
    pub predictions: Vec<usize>,
}

/// Combine the frozen backbone with a learned intervention.
pub fn infer(
    bb: &FrozenBackbone,
    iv: &Intervention,
    mask: &InterventionMask,
    x: &DenseMatrix,
    mode: InferenceMode,
) -> Result<InferenceResult, AdaptError> {
    let (clean, _) = bb.forward(x, None)?;
    let logits = if mask.count() == 0 {
        clean
    } else {
        let mut hook = make_frozen_hook(iv, mask);
        let (hooked, _) = bb.forward(x, Some(&mut hook))?;
        match mode {
            InferenceMode::Propagating => hooked,
            InferenceMode::GatedDualPass => {
                let mut out = clean;
                for r in mask.indices() {
                    let row: Vec<f64> = hooked.row(r).to_vec();
                    out.row_mut(r).copy_from_slice(&row);
                }
                out
            }
        }
    };
    let predictions = logits.argmax_rows();
    Ok(InferenceResult { logits, predictions })
}

/// Convenience wrapper: frozen-baseline accuracy and adapted accuracy on a
/// node set.
pub fn paired_accuracy(
    bb: &FrozenBackbone,
    iv: &Intervention,
    mask: &InterventionMask,
    g: &Graph,
    rows: &[usize],
    mode: InferenceMode,
) -> Result<(f64, f64), AdaptError> {
    let (clean, _) = bb.forward(&g.features, None)?;
    let frozen = accuracy(&clean, &g.labels, rows);
    let adapted_logits = infer(bb, iv, mask, &g.features, mode)?.logits;
    let adapted = accuracy(&adapted_logits, &g.labels, rows);
    Ok((frozen, adapted))
}

/// Test-time adaptation: optimize the intervention (plus decoder and mask
/// tokens) against the masked-reconstruction-plus-entropy objective, with the
/// backbone frozen. Returns the epoch snapshot with the lowest total loss and
/// a per-epoch report.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    bb: &FrozenBackbone,
    g: &Graph,
    masks: &SplitMasks,
    sel_cfg: &SelectionConfig,
    initial: Intervention,
    mask_cfg: &MaskingConfig,
    ssl_cfg: &SslConfig,
    key: RngKey,
) -> Result<(Intervention, AdaptReport), AdaptError> {
    sel_cfg.validate().map_err(AdaptError::Config)?;
    mask_cfg.validate().map_err(AdaptError::Config)?;
    ssl_cfg.validate().map_err(AdaptError::Config)?;
    let fingerprint_before = bb.fingerprint();
    let test_rows: Arc<[usize]> = Arc::from(masks.test_indices());
    if test_rows.is_empty() {
        return Err(AdaptError::EmptyTestMask);
    }
    let candidates = sel_cfg.candidates(masks);
    if candidates.is_empty() {
        return Err(AdaptError::Config("empty candidate set".into()));
    }

    // Threshold from the initial (identity-intervention) predictions, fixed
    // for the whole run.
    let initial_proba = bb.predict_proba(&g.features)?;
    let initial_entropies = predictive_entropy(&initial_proba);
    let threshold = sel_cfg
        .entropy_threshold
        .unwrap_or_else(|| median_entropy(&initial_entropies, &candidates));

    let select = |entropies: &[f64], epoch: usize| -> InterventionMask {
        let probs = gate_probabilities(entropies, threshold, sel_cfg.alpha_gate);
        sample_mask(&probs, &candidates, sel_cfg.mode, key.child(10_000 + epoch as u64))
    };
    let mut target_mask = select(&initial_entropies, 0);

    // Trainable state: intervention parameters, decoder, both tokens.
    let mut store = ParamStore::new();
    let iv_refs: InterventionRefs = initial.register_params(&mut store);
    let hidden_dim = bb.layer_dim(bb.num_layers().saturating_sub(1).max(1));
    let decoder = Decoder::init(hidden_dim, g.feature_dim(), key.child(1));
    let dec_w_ref: ParamRef = store.register("decoder.weight", decoder.weight.clone());
    let dec_b_ref: ParamRef = store.register("decoder.bias", decoder.bias.clone());
    let mask_token_ref: ParamRef =
        store.register("mask_token", DenseMatrix::zeros(1, g.feature_dim()));
    let remask_token_ref: ParamRef = store.register("remask_token", DenseMatrix::zeros(1, hidden_dim));

    let mut adam = AdamState::new();
    let mut report = AdaptReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_loss: f64::INFINITY,
        selected: target_mask.indices(),
        entropy_threshold: threshold,
        fingerprint_verified: false,
    };
    let mut best = initial.clone();

    if ssl_cfg.epochs == 0 {
        report.fingerprint_verified = bb.verify_fingerprint() && bb.fingerprint() == fingerprint_before;
        return Ok((initial, report));
    }

    for epoch in 0..ssl_cfg.epochs {
        if ssl_cfg.resample_targets && epoch > 0 {
            let snapshot = iv_refs.snapshot(&store);
            let mut hook = make_frozen_hook(&snapshot, &target_mask);
            let (logits, _) = bb.forward(&g.features, Some(&mut hook))?;
            let entropies = predictive_entropy(&softmax_rows(&logits));
            target_mask = select(&entropies, epoch);
            report.selected = target_mask.indices();
        }

        let p_mask = mask_probabilities(&target_mask, &g.adj, mask_cfg);
        let mut epoch_stream = key.child(20_000 + epoch as u64).stream();
        let masked_set = sample_masked_set(&p_mask, &mut epoch_stream);
        let masked_rows: Arc<[usize]> = Arc::from(masked_set.clone());

        let mut tape = Tape::new();
        let leaves = store.tape_leaves(&mut tape);
        let bound = iv_refs.bind(&leaves);
        let x_const = tape.constant(&g.features);

        // Reconstruction branch on masked features.
        let x_masked = tape.mask_rows_with_token(
            x_const,
            leaves[mask_token_ref.index()],
            &masked_rows,
        )?;
        let mut recon_hook = make_hook(bound.clone(), &target_mask);
        let z = reconstruct_tape(
            &mut tape,
            bb,
            Some(&mut recon_hook),
            x_masked,
            &masked_rows,
            leaves[remask_token_ref.index()],
            leaves[dec_w_ref.index()],
            leaves[dec_b_ref.index()],
        )?;
        let target = Arc::new(g.features.clone());
        let (recon_loss_id, sce_skipped) = if masked_set.is_empty() {
            // Nothing was masked this epoch; reconstruction contributes zero.
            let zero = tape.constant(&DenseMatrix::zeros(1, 1));
            (zero, 0)
        } else {
            tape.scaled_cosine_error(&target, z, &masked_rows, ssl_cfg.gamma)?
        };

        // Entropy branch on clean features through the same hooked encoder.
        let mut ent_hook = make_hook(bound, &target_mask);
        let ent_trace = bb.forward_tape(&mut tape, x_const, Some(&mut ent_hook))?;
        let ent_loss_id = if ssl_cfg.gated_entropy {
            // Entropy of the gated predictive distribution over the test
            // mask: hooked logits for selected rows (the gradient path),
            // clean-forward entropy as a constant for everyone else.
            let selected_test: Vec<usize> =
                test_rows.iter().copied().filter(|&r| target_mask.is_selected(r)).collect();
            let clean_rest: f64 = test_rows
                .iter()
                .filter(|r| !target_mask.is_selected(**r))
                .map(|&r| initial_entropies[r])
                .sum();
            if selected_test.is_empty() {
                let value = DenseMatrix::filled(1, 1, |_, _| clean_rest / test_rows.len() as f64);
                tape.constant(&value)
            } else {
                let k = selected_test.len() as f64;
                let rows_sel: Arc<[usize]> = Arc::from(selected_test);
                let hooked_part = tape.mean_entropy(ent_trace.logits, &rows_sel)?;
                let scaled = tape.scale(hooked_part, k / test_rows.len() as f64);
                let rest =
                    DenseMatrix::filled(1, 1, |_, _| clean_rest / test_rows.len() as f64);
                let rest_id = tape.constant(&rest);
                tape.add(scaled, rest_id)?
            }
        } else {
            tape.mean_entropy(ent_trace.logits, &test_rows)?
        };

        let scaled_ent = tape.scale(ent_loss_id, ssl_cfg.lambda_entropy);
        let total_id = tape.add(recon_loss_id, scaled_ent)?;

        let loss_recon = tape.value(recon_loss_id).get(0, 0);
        let loss_ent = tape.value(ent_loss_id).get(0, 0);
        let loss_total = tape.value(total_id).get(0, 0);
        if !loss_total.is_finite() {
            return Err(AdaptError::Diverged { epoch, loss: loss_total, report: Box::new(report) });
        }

        let grads = tape.backward(total_id)?;
        if let Err(err) = adam.step(&mut store, &leaves, &grads, ssl_cfg.lr) {
            // A non-finite gradient is a divergence, reported with the
            // progress so far.
            if matches!(err, crate::kernel::KernelError::NanGradient { .. }) {
                return Err(AdaptError::Diverged { epoch, loss: loss_total, report: Box::new(report) });
            }
            return Err(err.into());
        }
        let ortho_residual = iv_refs.retract_in_store(&mut store)?;

        report.epochs.push(EpochRecord {
            epoch,
            loss_reconstruction: loss_recon,
            loss_entropy: loss_ent,
            loss_total,
            masked_count: masked_set.len(),
            selected_count: target_mask.count(),
            ortho_residual,
            sce_skipped,
        });
        if loss_total < report.best_loss {
            report.best_loss = loss_total;
            report.best_epoch = Some(epoch);
            best = iv_refs.snapshot(&store);
        }
    }

    report.fingerprint_verified = bb.verify_fingerprint() && bb.fingerprint() == fingerprint_before;
    if !report.fingerprint_verified {
        return Err(AdaptError::FingerprintDrift);
    }
    Ok((best, report))
}
