//! Benchmark construction and paired frozen-vs-adapted evaluation runs.

use anyhow::{Context, Result};

use ttrf_core::backbone::{accuracy, pretrain, FrozenBackbone, PretrainConfig};
use ttrf_core::graph::{
    apply_shift_with, load_dataset, make_degree_concept_split, make_synthetic_sbm,
    sample_planar_rotation, Graph, SplitMasks,
};
use ttrf_core::iamae::{adapt, infer, InferenceMode, MaskingConfig, SslConfig};
use ttrf_core::intervention::{Intervention, VariantKind};
use ttrf_core::kernel::{DenseMatrix, RngKey};
use ttrf_core::selection::{InterventionMask, SelectionConfig};

use crate::config::{DataSource, ExperimentConfig, ShiftConfigKind};

/// Synthetic out-of-distribution benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// Pretrain on clean features, adapt/evaluate on orthogonally rotated
    /// features (random node split).
    Covariate,
    /// Train on low-degree nodes, evaluate on high-degree nodes.
    ConceptDegree,
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub kind: ShiftKind,
    pub n: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Covariate only: rotation strength in [0, 1].
    pub shift_strength: f64,
    /// Covariate only: number of rotated feature planes (the shift rank is
    /// twice this).
    pub shift_planes: usize,
    /// Covariate only: strength of the additional rotation hitting the
    /// strongly shifted test subpopulation.
    pub shift_extra_strength: f64,
    /// Covariate only: fraction of test nodes in the strongly shifted
    /// subpopulation.
    pub shift_fraction: f64,
    /// Concept only: degree quantile for the train/test boundary.
    pub degree_quantile: f64,
    /// Concept only: feature offset strength above the boundary.
    pub concept_offset: f64,
    /// Covariate only: fraction of nodes in the train mask.
    pub train_fraction: f64,
}

impl BenchmarkSpec {
    /// The canonical covariate benchmark: 500-node 4-class SBM, the whole
    /// target graph mildly rotated plus a stronger rotation on a 30% test
    /// subpopulation.
    pub fn acceptance_covariate() -> Self {
        BenchmarkSpec {
            shift_strength: 0.25,
            shift_planes: 8,
            shift_extra_strength: 0.6,
            shift_fraction: 0.3,
            ..Self::covariate(500, 4)
        }
    }

    /// The canonical degree-concept benchmark: train on low-degree nodes,
    /// test on high-degree nodes whose feature mechanism is offset.
    pub fn acceptance_concept() -> Self {
        BenchmarkSpec { concept_offset: 2.0, ..Self::concept(500, 4) }
    }

    pub fn covariate(n: usize, classes: usize) -> Self {
        BenchmarkSpec {
            kind: ShiftKind::Covariate,
            n,
            classes,
            feature_dim: 16,
            p_in: 0.08,
            p_out: 0.008,
            shift_strength: 0.5,
            shift_planes: 2,
            shift_extra_strength: 0.0,
            shift_fraction: 0.3,
            degree_quantile: 0.7,
            concept_offset: 3.0,
            train_fraction: 0.6,
        }
    }

    pub fn concept(n: usize, classes: usize) -> Self {
        BenchmarkSpec { kind: ShiftKind::ConceptDegree, ..Self::covariate(n, classes) }
    }
}

/// A materialized benchmark: the graph seen at pretraining time, the graph
/// seen at test time (same topology and labels; features may be shifted),
/// and the split masks.
pub struct BenchmarkData {
    pub source: Graph,
    pub target: Graph,
    pub masks: SplitMasks,
}

/// Seeded random node split with the given train fraction; 10% val.
fn random_split(n: usize, train_fraction: f64, key: RngKey) -> Result<SplitMasks> {
    let mut order: Vec<usize> = (0..n).collect();
    key.stream().shuffle(&mut order);
    let n_train = ((n as f64) * train_fraction) as usize;
    let n_val = (n / 10).max(1);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    SplitMasks::from_indices(n, &train, &val, &test).context("benchmark split")
}

/// Materialize the data described by an [`ExperimentConfig`]: generate or
/// load the graph, build the split, and apply the configured shift. All
/// randomness derives from `cfg.data_seed`.
pub fn build_data(cfg: &ExperimentConfig) -> Result<BenchmarkData> {
    let key = RngKey::new(cfg.data_seed);
    match &cfg.data {
        DataSource::Sbm { n, classes, dim, p_in, p_out } => {
            let g = make_synthetic_sbm(*n, *classes, *p_in, *p_out, *dim, key.child(0))
                .context("sbm generation")?;
            match cfg.shift_kind {
                ShiftConfigKind::None => {
                    let masks = random_split(*n, cfg.train_fraction, key.child(1))?;
                    Ok(BenchmarkData { source: g.clone(), target: g, masks })
                }
                ShiftConfigKind::Covariate => {
                    let masks = random_split(*n, cfg.train_fraction, key.child(1))?;
                    let q = sample_planar_rotation(
                        *dim,
                        cfg.shift_planes,
                        cfg.shift_strength,
                        key.child(2),
                    );
                    let mut target = apply_shift_with(&g, &q).context("orthogonal shift")?;
                    if cfg.shift_extra_strength > 0.0 && cfg.shift_fraction > 0.0 {
                        let q_extra = sample_planar_rotation(
                            *dim,
                            cfg.shift_planes,
                            cfg.shift_extra_strength,
                            key.child(4),
                        );
                        target =
                            shift_subset(&target, &q_extra, &masks, cfg.shift_fraction, key.child(3))?;
                    }
                    Ok(BenchmarkData { source: g, target, masks })
                }
                ShiftConfigKind::ConceptDegree => {
                    let masks = make_degree_concept_split(&g, cfg.degree_quantile, key.child(1))
                        .context("degree split")?;
                    let target = offset_by_degree(&g, &masks, cfg.concept_offset, key.child(3))?;
                    Ok(BenchmarkData { source: g, target, masks })
                }
            }
        }
        DataSource::Files { edges, features, labels, split } => {
            let (g, masks) = load_dataset(edges, features, labels, split)
                .context("loading dataset files")?;
            match cfg.shift_kind {
                ShiftConfigKind::None => Ok(BenchmarkData { source: g.clone(), target: g, masks }),
                ShiftConfigKind::Covariate => {
                    let q = sample_planar_rotation(
                        g.feature_dim(),
                        cfg.shift_planes,
                        cfg.shift_strength,
                        key.child(2),
                    );
                    let mut target = apply_shift_with(&g, &q).context("orthogonal shift")?;
                    if cfg.shift_extra_strength > 0.0 && cfg.shift_fraction > 0.0 {
                        let q_extra = sample_planar_rotation(
                            g.feature_dim(),
                            cfg.shift_planes,
                            cfg.shift_extra_strength,
                            key.child(4),
                        );
                        target =
                            shift_subset(&target, &q_extra, &masks, cfg.shift_fraction, key.child(3))?;
                    }
                    Ok(BenchmarkData { source: g, target, masks })
                }
                ShiftConfigKind::ConceptDegree => {
                    // File-based splits are replaced by the degree split.
                    let masks = make_degree_concept_split(&g, cfg.degree_quantile, key.child(1))
                        .context("degree split")?;
                    let target = offset_by_degree(&g, &masks, cfg.concept_offset, key.child(3))?;
                    Ok(BenchmarkData { source: g, target, masks })
                }
            }
        }
    }
}

/// Adaptation arm from a full experiment config.
pub fn adapt_spec_from_config(cfg: &ExperimentConfig) -> AdaptSpec {
    AdaptSpec {
        variant: cfg.variant,
        rank: cfg.rank,
        layers: cfg.layers.clone(),
        selection: cfg.selection.clone(),
        masking: cfg.masking,
        ssl: cfg.ssl,
        inference: cfg.inference,
    }
}

pub fn build_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<BenchmarkData> {
    let key = RngKey::new(seed);
    let g = make_synthetic_sbm(
        spec.n,
        spec.classes,
        spec.p_in,
        spec.p_out,
        spec.feature_dim,
        key.child(0),
    )
    .context("sbm generation")?;
    match spec.kind {
        ShiftKind::Covariate => {
            let masks = random_split(spec.n, spec.train_fraction, key.child(1))?;
            let q = sample_planar_rotation(
                spec.feature_dim,
                spec.shift_planes,
                spec.shift_strength,
                key.child(2),
            );
            // Pretraining sees the clean source graph; at test time the
            // whole deployment graph is rotated, and a seeded subpopulation
            // of test nodes is hit by an additional rotation on top.
            let mut target = apply_shift_with(&g, &q).context("orthogonal shift")?;
            if spec.shift_extra_strength > 0.0 && spec.shift_fraction > 0.0 {
                let q_extra = sample_planar_rotation(
                    spec.feature_dim,
                    spec.shift_planes,
                    spec.shift_extra_strength,
                    key.child(4),
                );
                target = shift_subset(&target, &q_extra, &masks, spec.shift_fraction, key.child(3))?;
            }
            Ok(BenchmarkData { source: g, target, masks })
        }
        ShiftKind::ConceptDegree => {
            let masks = make_degree_concept_split(&g, spec.degree_quantile, key.child(1))
                .context("degree split")?;
            // Concept shift: at test time the feature mechanism of the
            // high-degree domain is translated along a fixed direction.
            // Pretraining sees the clean graph; adaptation and evaluation
            // meet the shifted one, in which training-side nodes still carry
            // source-distribution features.
            let target = offset_by_degree(&g, &masks, spec.concept_offset, key.child(3))?;
            Ok(BenchmarkData { source: g, target, masks })
        }
    }
}

/// Rotate the features of a seeded random fraction of test nodes by `q`;
/// every other node keeps its source features.
fn shift_subset(
    g: &Graph,
    q: &DenseMatrix,
    masks: &SplitMasks,
    fraction: f64,
    key: RngKey,
) -> Result<Graph> {
    let rotated = apply_shift_with(g, q).context("orthogonal shift")?;
    let mut test_nodes = masks.test_indices();
    key.stream().shuffle(&mut test_nodes);
    let take = ((test_nodes.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut features = g.features.clone();
    for &i in test_nodes.iter().take(take) {
        let row: Vec<f64> = rotated.features.row(i).to_vec();
        features.row_mut(i).copy_from_slice(&row);
    }
    Graph::new(g.adj.clone(), features, g.labels.clone(), g.num_classes).context("shifted graph")
}

/// Add a fixed random offset direction to the features of every node on the
/// high-degree (test) side of the split: the feature mechanism of that
/// domain is translated by `kappa * v`, while training-side nodes keep the
/// source mechanism.
fn offset_by_degree(g: &Graph, masks: &SplitMasks, kappa: f64, key: RngKey) -> Result<Graph> {
    if kappa == 0.0 {
        return Ok(g.clone());
    }
    let mut stream = key.stream();
    let d = g.feature_dim();
    let mut direction: Vec<f64> = (0..d).map(|_| stream.normal()).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in &mut direction {
        *v /= norm;
    }
    let mut features = g.features.clone();
    for i in 0..g.n() {
        if masks.test[i] {
            for (f, v) in features.row_mut(i).iter_mut().zip(&direction) {
                *f += kappa * v;
            }
        }
    }
    Graph::new(g.adj.clone(), features, g.labels.clone(), g.num_classes).context("offset graph")
}

/// Everything needed to run one adaptation arm.
#[derive(Debug, Clone)]
pub struct AdaptSpec {
    pub variant: VariantKind,
    pub rank: usize,
    /// Target layers (1-based).
    pub layers: Vec<usize>,
    pub selection: SelectionConfig,
    pub masking: MaskingConfig,
    pub ssl: SslConfig,
    pub inference: InferenceMode,
}

impl Default for AdaptSpec {
    fn default() -> Self {
        AdaptSpec {
            variant: VariantKind::LoReft,
            rank: 8,
            layers: vec![1],
            selection: SelectionConfig::default(),
            masking: MaskingConfig::default(),
            ssl: SslConfig::default(),
            inference: InferenceMode::GatedDualPass,
        }
    }
}

impl AdaptSpec {
    /// The adaptation configuration used by the canonical benchmarks: a
    /// rank-4 subspace intervention at layer 1 on the top-quartile-entropy
    /// test nodes, light masking, and a moderate entropy weight.
    pub fn acceptance() -> Self {
        AdaptSpec {
            variant: VariantKind::LoReft,
            rank: 4,
            layers: vec![1],
            selection: SelectionConfig {
                mode: ttrf_core::selection::SelectionMode::TopFraction(0.25),
                ..Default::default()
            },
            masking: MaskingConfig { rho: 0.3, ..Default::default() },
            ssl: SslConfig { epochs: 30, lambda_entropy: 0.25, lr: 0.01, ..Default::default() },
            inference: InferenceMode::GatedDualPass,
        }
    }
}

/// Outcome of one paired run.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub frozen_test: f64,
    pub adapted_test: f64,
    pub frozen_train: f64,
    pub adapted_train: f64,
    /// Accuracy over the selected (intervened) subset only.
    pub frozen_selected: f64,
    pub adapted_selected: f64,
    pub selected_count: usize,
    pub best_epoch: Option<usize>,
    pub max_ortho_residual: f64,
}

impl PairOutcome {
    pub fn gain(&self) -> f64 {
        self.adapted_test - self.frozen_test
    }
}

pub fn layer_dims(bb: &FrozenBackbone, layers: &[usize]) -> Vec<(usize, usize)> {
    layers.iter().map(|&l| (l, bb.layer_dim(l))).collect()
}

/// Pretrain on the source graph, adapt on the target graph, compare test
/// accuracy frozen vs adapted (and train-node accuracy for the retention
/// guarantee).
pub fn run_pair(
    data: &BenchmarkData,
    pretrain_cfg: &PretrainConfig,
    spec: &AdaptSpec,
    seed: u64,
) -> Result<PairOutcome> {
    let key = RngKey::new(seed);
    let (bb, _) = pretrain(&data.source, &data.masks, pretrain_cfg, key.child(0))
        .context("pretraining")?;
    let iv0 = Intervention::initialize(
        spec.variant,
        spec.rank,
        &layer_dims(&bb, &spec.layers),
        key.child(1),
    )
    .context("intervention init")?;
    let (best, report) = adapt(
        &bb,
        &data.target,
        &data.masks,
        &spec.selection,
        iv0,
        &spec.masking,
        &spec.ssl,
        key.child(2),
    )
    .context("adaptation")?;

    let mut mask = InterventionMask::empty(data.target.n());
    for &i in &report.selected {
        mask.selected[i] = true;
        mask.probs[i] = 1.0;
    }
    let (frozen_logits, _) = bb.forward(&data.target.features, None).context("frozen forward")?;
    let adapted_logits =
        infer(&bb, &best, &mask, &data.target.features, spec.inference).context("inference")?.logits;
    let test_rows = data.masks.test_indices();
    let train_rows = data.masks.train_indices();
    let max_ortho_residual =
        report.epochs.iter().map(|e| e.ortho_residual).fold(0.0f64, f64::max);
    Ok(PairOutcome {
        frozen_test: accuracy(&frozen_logits, &data.target.labels, &test_rows),
        adapted_test: accuracy(&adapted_logits, &data.target.labels, &test_rows),
        frozen_train: accuracy(&frozen_logits, &data.target.labels, &train_rows),
        adapted_train: accuracy(&adapted_logits, &data.target.labels, &train_rows),
        frozen_selected: accuracy(&frozen_logits, &data.target.labels, &report.selected),
        adapted_selected: accuracy(&adapted_logits, &data.target.labels, &report.selected),
        selected_count: report.selected.len(),
        best_epoch: report.best_epoch,
        max_ortho_residual,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
