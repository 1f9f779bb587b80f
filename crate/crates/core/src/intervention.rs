//! Low-rank representation interventions applied as forward hooks.
//!
//! The main instance edits a hidden representation inside an r-dimensional
//! subspace with a row-orthonormal basis: `h + R^T (W h + b - R h)`. Two
//! ablation variants share the hook machinery: an unconstrained two-matrix
//! edit `h + W2^T (W1 h + b)` and a plain low-rank residual `h + U V^T h`.
//! All variants are initialized so the intervention starts as the exact
//! identity; adaptation alone moves it.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::backbone::{read_hex_matrix, write_hex_matrix};
use crate::kernel::{
    gram_residual, qr_reorthogonalize, random_orthonormal_rows, DenseMatrix, KernelError,
    ParamRef, ParamStore, RngKey, Tape, VarId,
};
use crate::selection::InterventionMask;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("intervention rank must be at least 1")]
    ZeroRank,

    #[error("rank {rank} exceeds layer {layer} width {dim}")]
    RankTooLarge { rank: usize, layer: usize, dim: usize },

    #[error("no intervention parameters registered for layer {0}")]
    UnknownLayer(usize),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("{path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    LoReft,
    DiReft,
    Uv,
}

impl VariantKind {
    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::LoReft => "loreft",
            VariantKind::DiReft => "direft",
            VariantKind::Uv => "uv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "loreft" => Some(VariantKind::LoReft),
            "direft" => Some(VariantKind::DiReft),
            "uv" => Some(VariantKind::Uv),
            _ => None,
        }
    }

    /// Tunable scalar count for one layer of width `d` at rank `r`.
    pub fn params_per_layer(&self, r: usize, d: usize) -> usize {
        match self {
            // R and W are r x d, plus the r-vector offset.
            VariantKind::LoReft => 2 * r * d + r,
            VariantKind::DiReft => 2 * r * d + r,
            // U and V are d x r, no offset.
            VariantKind::Uv => 2 * d * r,
        }
    }
}

/// Parameters of one intervention layer.
#[derive(Debug, Clone)]
pub enum LayerParams {
    LoReft {
        /// Row-orthonormal subspace basis, r x d.
        basis: DenseMatrix,
        /// Projection source, r x d.
        proj: DenseMatrix,
        /// Offset inside the subspace, 1 x r.
        bias: DenseMatrix,
    },
    DiReft {
        w1: DenseMatrix,
        w2: DenseMatrix,
        bias: DenseMatrix,
    },
    Uv {
        u: DenseMatrix,
        v: DenseMatrix,
    },
}

impl LayerParams {
    fn scalar_count(&self) -> usize {
        match self {
            LayerParams::LoReft { basis, proj, bias } => basis.len() + proj.len() + bias.len(),
            LayerParams::DiReft { w1, w2, bias } => w1.len() + w2.len() + bias.len(),
            LayerParams::Uv { u, v } => u.len() + v.len(),
        }
    }

    fn width(&self) -> usize {
        match self {
            LayerParams::LoReft { basis, .. } => basis.cols(),
            LayerParams::DiReft { w1, .. } => w1.cols(),
            LayerParams::Uv { u, .. } => u.rows(),
        }
    }
}

/// A full intervention: one parameter set per target layer, applied to the
/// rows selected by an [`InterventionMask`].
#[derive(Debug, Clone)]
pub struct Intervention {
    pub kind: VariantKind,
    pub rank: usize,
    /// `(layer, params)` sorted by layer index (1-based).
    pub layers: Vec<(usize, LayerParams)>,
}

impl Intervention {
    /// Identity-at-initialization parameters for the given `(layer, width)`
    /// targets. For the orthonormal variant, `W` starts as a copy of `R` and
    /// `b` at zero, so `W h + b - R h` vanishes; the other variants start
    /// with their outer factor at zero.
    pub fn initialize(
        kind: VariantKind,
        rank: usize,
        layer_dims: &[(usize, usize)],
        key: RngKey,
    ) -> Result<Self, InterventionError> {
        if rank == 0 {
            return Err(InterventionError::ZeroRank);
        }
        let mut layers = Vec::new();
        for (i, &(layer, dim)) in layer_dims.iter().enumerate() {
            if rank > dim {
                return Err(InterventionError::RankTooLarge { rank, layer, dim });
            }
            let mut stream = key.child(i as u64).stream();
            let params = match kind {
                VariantKind::LoReft => {
                    let basis = random_orthonormal_rows(rank, dim, &mut stream)?;
                    LayerParams::LoReft {
                        proj: basis.clone(),
                        bias: DenseMatrix::zeros(1, rank),
                        basis,
                    }
                }
                VariantKind::DiReft => LayerParams::DiReft {
                    w1: random_orthonormal_rows(rank, dim, &mut stream)?,
                    w2: DenseMatrix::zeros(rank, dim),
                    bias: DenseMatrix::zeros(1, rank),
                },
                VariantKind::Uv => LayerParams::Uv {
                    u: DenseMatrix::zeros(dim, rank),
                    v: random_orthonormal_rows(rank, dim, &mut stream)?.transpose(),
                },
            };
            layers.push((layer, params));
        }
        layers.sort_by_key(|&(l, _)| l);
        Ok(Intervention { kind, rank, layers })
    }

    pub fn target_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|&(l, _)| l).collect()
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams> {
        self.layers.iter().find(|&&(l, _)| l == layer).map(|(_, p)| p)
    }

    /// Tunable parameter count by direct enumeration of the stored tensors.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(_, p)| p.scalar_count()).sum()
    }

    /// Closed-form parameter count for a configuration, without building it.
    pub fn parameter_count_formula(kind: VariantKind, rank: usize, widths: &[usize]) -> usize {
        widths.iter().map(|&d| kind.params_per_layer(rank, d)).sum()
    }

    /// Worst orthonormality residual over the basis matrices (zero for
    /// unconstrained variants).
    pub fn basis_residual(&self) -> f64 {
        self.layers
            .iter()
            .map(|(_, p)| match p {
                LayerParams::LoReft { basis, .. } => gram_residual(basis),
                _ => 0.0,
            })
            .fold(0.0, f64::max)
    }

    /// Retract every basis back onto the row-orthonormal set.
    pub fn retract(&mut self) -> Result<(), InterventionError> {
        for (_, p) in &mut self.layers {
            if let LayerParams::LoReft { basis, .. } = p {
                *basis = qr_reorthogonalize(basis)?;
            }
        }
        Ok(())
    }

    /// Apply the intervention to a matrix whose rows are the selected nodes'
    /// representations at `layer`.
    pub fn apply(&self, layer: usize, h: &DenseMatrix) -> Result<DenseMatrix, InterventionError> {
        let params = self
            .layer_params(layer)
            .ok_or(InterventionError::UnknownLayer(layer))?;
        let mut tape = Tape::new();
        let hid = tape.constant(h);
        let bound = bind_constant(&mut tape, params);
        let out = apply_tape(&mut tape, &bound, hid)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub enum BoundLayer {
    LoReft { basis: VarId, proj: VarId, bias: VarId },
    DiReft { w1: VarId, w2: VarId, bias: VarId },
    Uv { u: VarId, v: VarId },
}

fn bind_constant(tape: &mut Tape, params: &LayerParams) -> BoundLayer {
    match params {
        LayerParams::LoReft { basis, proj, bias } => BoundLayer::LoReft {
            basis: tape.constant(basis),
            proj: tape.constant(proj),
            bias: tape.constant(bias),
        },
        LayerParams::DiReft { w1, w2, bias } => BoundLayer::DiReft {
            w1: tape.constant(w1),
            w2: tape.constant(w2),
            bias: tape.constant(bias),
        },
        LayerParams::Uv { u, v } => {
            BoundLayer::Uv { u: tape.constant(u), v: tape.constant(v) }
        }
    }
}

/// The intervention transform as tape operations over a row-gathered `h`.
pub fn apply_tape(tape: &mut Tape, bound: &BoundLayer, h: VarId) -> Result<VarId, KernelError> {
    match *bound {
        BoundLayer::LoReft { basis, proj, bias } => {
            // h + R^T (W h + b - R h), row convention: H + (H W^T + b - H R^T) R
            let wt = tape.transpose(proj);
            let rt = tape.transpose(basis);
            let hw = tape.matmul(h, wt)?;
            let hr = tape.matmul(h, rt)?;
            let diff = tape.sub(hw, hr)?;
            let s = tape.add_row_broadcast(diff, bias)?;
            let delta = tape.matmul(s, basis)?;
            tape.add(h, delta)
        }
        BoundLayer::DiReft { w1, w2, bias } => {
            // h + W2^T (W1 h + b): H + (H W1^T + b) W2
            let w1t = tape.transpose(w1);
            let hw = tape.matmul(h, w1t)?;
            let s = tape.add_row_broadcast(hw, bias)?;
            let delta = tape.matmul(s, w2)?;
            tape.add(h, delta)
        }
        BoundLayer::Uv { u, v } => {
            // h + U V^T h: H + (H V) U^T
            let hv = tape.matmul(h, v)?;
            let ut = tape.transpose(u);
            let delta = tape.matmul(hv, ut)?;
            tape.add(h, delta)
        }
    }
}

/// Store references for the trainable parameters of an intervention.
#[derive(Debug, Clone)]
pub struct InterventionRefs {
    pub kind: VariantKind,
    pub rank: usize,
    layers: Vec<(usize, RefLayer)>,
}

#[derive(Debug, Clone, Copy)]
enum RefLayer {
    LoReft { basis: ParamRef, proj: ParamRef, bias: ParamRef },
    DiReft { w1: ParamRef, w2: ParamRef, bias: ParamRef },
    Uv { u: ParamRef, v: ParamRef },
}

impl Intervention {
    /// Register every parameter in a store (for optimization) and return the
    /// references needed to rebuild or retract it.
    pub fn register_params(&self, store: &mut ParamStore) -> InterventionRefs {
        let mut layers = Vec::new();
        for (l, p) in &self.layers {
            let refs = match p {
                LayerParams::LoReft { basis, proj, bias } => RefLayer::LoReft {
                    basis: store.register(format!("iv{l}.basis"), basis.clone()),
                    proj: store.register(format!("iv{l}.proj"), proj.clone()),
                    bias: store.register(format!("iv{l}.bias"), bias.clone()),
                },
                LayerParams::DiReft { w1, w2, bias } => RefLayer::DiReft {
                    w1: store.register(format!("iv{l}.w1"), w1.clone()),
                    w2: store.register(format!("iv{l}.w2"), w2.clone()),
                    bias: store.register(format!("iv{l}.bias"), bias.clone()),
                },
                LayerParams::Uv { u, v } => RefLayer::Uv {
                    u: store.register(format!("iv{l}.u"), u.clone()),
                    v: store.register(format!("iv{l}.v"), v.clone()),
                },
            };
            layers.push((*l, refs));
        }
        InterventionRefs { kind: self.kind, rank: self.rank, layers }
    }
}

impl InterventionRefs {
    /// Materialize the current store values into an [`Intervention`].
    pub fn snapshot(&self, store: &ParamStore) -> Intervention {
        let layers = self
            .layers
            .iter()
            .map(|&(l, refs)| {
                let params = match refs {
                    RefLayer::LoReft { basis, proj, bias } => LayerParams::LoReft {
                        basis: store.value(basis).clone(),
                        proj: store.value(proj).clone(),
                        bias: store.value(bias).clone(),
                    },
                    RefLayer::DiReft { w1, w2, bias } => LayerParams::DiReft {
                        w1: store.value(w1).clone(),
                        w2: store.value(w2).clone(),
                        bias: store.value(bias).clone(),
                    },
                    RefLayer::Uv { u, v } => LayerParams::Uv {
                        u: store.value(u).clone(),
                        v: store.value(v).clone(),
                    },
                };
                (l, params)
            })
            .collect();
        Intervention { kind: self.kind, rank: self.rank, layers }
    }

    /// Retract every basis in the store onto the row-orthonormal set and
    /// return the worst post-retraction residual.
    pub fn retract_in_store(&self, store: &mut ParamStore) -> Result<f64, InterventionError> {
        let mut worst = 0.0f64;
        for &(_, refs) in &self.layers {
            if let RefLayer::LoReft { basis, .. } = refs {
                let retracted = qr_reorthogonalize(store.value(basis))?;
                worst = worst.max(gram_residual(&retracted));
                store.set_value(basis, retracted);
            }
        }
        Ok(worst)
    }

    /// Bind this intervention's leaves on a fresh tape, given the leaf ids
    /// aligned with the store's registration order.
    pub fn bind(&self, leaves: &[VarId]) -> Vec<(usize, BoundLayer)> {
        self.layers
            .iter()
            .map(|&(l, refs)| {
                let bound = match refs {
                    RefLayer::LoReft { basis, proj, bias } => BoundLayer::LoReft {
                        basis: leaves[basis.index()],
                        proj: leaves[proj.index()],
                        bias: leaves[bias.index()],
                    },
                    RefLayer::DiReft { w1, w2, bias } => BoundLayer::DiReft {
                        w1: leaves[w1.index()],
                        w2: leaves[w2.index()],
                        bias: leaves[bias.index()],
                    },
                    RefLayer::Uv { u, v } => {
                        BoundLayer::Uv { u: leaves[u.index()], v: leaves[v.index()] }
                    }
                };
                (l, bound)
            })
            .collect()
    }
}

/// Build a per-layer forward hook: at each target layer the selected rows are
/// gathered, transformed, and scattered back; every other row passes through
/// bit-identically. An empty target set yields a pure pass-through.
pub fn make_hook(
    bound: Vec<(usize, BoundLayer)>,
    mask: &InterventionMask,
) -> impl FnMut(&mut Tape, usize, VarId) -> Result<VarId, KernelError> {
    let rows: Arc<[usize]> = Arc::from(mask.indices());
    move |tape: &mut Tape, layer: usize, h: VarId| {
        if rows.is_empty() {
            return Ok(h);
        }
        let Some((_, params)) = bound.iter().find(|&&(l, _)| l == layer) else {
            return Ok(h);
        };
        let gathered = tape.gather_rows(h, &rows)?;
        let edited = apply_tape(tape, params, gathered)?;
        tape.scatter_rows(h, &rows, edited)
    }
}

/// Hook over an intervention's own values (constants, no gradients); used at
/// inference time.
pub fn make_frozen_hook<'a>(
    iv: &'a Intervention,
    mask: &InterventionMask,
) -> impl FnMut(&mut Tape, usize, VarId) -> Result<VarId, KernelError> + 'a {
    let rows: Arc<[usize]> = Arc::from(mask.indices());
    let mut cache: Vec<(usize, BoundLayer)> = Vec::new();
    move |tape: &mut Tape, layer: usize, h: VarId| {
        if rows.is_empty() {
            return Ok(h);
        }
        let Some(params) = iv.layer_params(layer) else {
            return Ok(h);
        };
        // Bind lazily per tape; forward passes touch each layer once.
        let bound = if let Some(&(_, b)) = cache.iter().find(|&&(l, _)| l == layer) {
            b
        } else {
            let b = bind_constant(tape, params);
            cache.push((layer, b));
            b
        };
        let gathered = tape.gather_rows(h, &rows)?;
        let edited = apply_tape(tape, &bound, gathered)?;
        tape.scatter_rows(h, &rows, edited)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const INTERVENTION_MAGIC: &str = "intervention v1";

pub fn save_intervention(path: &Path, iv: &Intervention) -> Result<(), InterventionError> {
    let mut out = String::new();
    let _ = writeln!(out, "{INTERVENTION_MAGIC}");
    let _ = writeln!(out, "kind {}", iv.kind.name());
    let _ = writeln!(out, "rank {}", iv.rank);
    let _ = writeln!(out, "layers {}", iv.layers.len());
    for (l, p) in &iv.layers {
        let _ = writeln!(out, "layer {l} width {}", p.width());
        match p {
            LayerParams::LoReft { basis, proj, bias } => {
                write_hex_matrix(&mut out, basis);
                write_hex_matrix(&mut out, proj);
                write_hex_matrix(&mut out, bias);
            }
            LayerParams::DiReft { w1, w2, bias } => {
                write_hex_matrix(&mut out, w1);
                write_hex_matrix(&mut out, w2);
                write_hex_matrix(&mut out, bias);
            }
            LayerParams::Uv { u, v } => {
                write_hex_matrix(&mut out, u);
                write_hex_matrix(&mut out, v);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| InterventionError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_intervention(path: &Path) -> Result<Intervention, InterventionError> {
    let text = std::fs::read_to_string(path).map_err(|e| InterventionError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let ck = |msg: String| InterventionError::Checkpoint { path: path.display().to_string(), msg };
    let mut lines = text.lines();
    if lines.next() != Some(INTERVENTION_MAGIC) {
        return Err(ck("not an intervention checkpoint (bad magic)".into()));
    }
    let kind = lines
        .next()
        .and_then(|l| l.strip_prefix("kind "))
        .and_then(VariantKind::parse)
        .ok_or_else(|| ck("bad kind line".into()))?;
    let rank: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("rank "))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ck("bad rank line".into()))?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("layers "))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ck("bad layers line".into()))?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let header = lines.next().ok_or_else(|| ck("truncated layer header".into()))?;
        let mut it = header
            .strip_prefix("layer ")
            .ok_or_else(|| ck("bad layer header".into()))?
            .split_whitespace();
        let layer: usize =
            it.next().and_then(|t| t.parse().ok()).ok_or_else(|| ck("bad layer index".into()))?;
        let width: usize = it
            .nth(1)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| ck("bad layer width".into()))?;
        let params = match kind {
            VariantKind::LoReft => LayerParams::LoReft {
                basis: read_hex_matrix(&mut lines, rank, width).map_err(&ck)?,
                proj: read_hex_matrix(&mut lines, rank, width).map_err(&ck)?,
                bias: read_hex_matrix(&mut lines, 1, rank).map_err(&ck)?,
            },
            VariantKind::DiReft => LayerParams::DiReft {
                w1: read_hex_matrix(&mut lines, rank, width).map_err(&ck)?,
                w2: read_hex_matrix(&mut lines, rank, width).map_err(&ck)?,
                bias: read_hex_matrix(&mut lines, 1, rank).map_err(&ck)?,
            },
            VariantKind::Uv => LayerParams::Uv {
                u: read_hex_matrix(&mut lines, width, rank).map_err(&ck)?,
                v: read_hex_matrix(&mut lines, width, rank).map_err(&ck)?,
            },
        };
        layers.push((layer, params));
    }
    Ok(Intervention { kind, rank, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RngKey;

    fn random_h(rows: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut s = RngKey::new(seed).stream();
        DenseMatrix::filled(rows, d, |_, _| s.normal())
    }

    #[test]
    fn vanishing_configuration_is_identity() {
        // W = R, b = 0: the subspace source equals the projection, so the
        // edit cancels exactly.
        let iv = Intervention::initialize(VariantKind::LoReft, 3, &[(1, 8)], RngKey::new(0)).unwrap();
        let h = random_h(5, 8, 1);
        let out = iv.apply(1, &h).unwrap();
        assert!(out.bits_eq(&h));
    }

    #[test]
    fn full_rank_identity_basis_overwrites_to_projection() {
        // r = d, R = I, W = 0, b = 0: h + I(0 - h) = 0.
        let d = 4;
        let iv = Intervention {
            kind: VariantKind::LoReft,
            rank: d,
            layers: vec![(
                1,
                LayerParams::LoReft {
                    basis: DenseMatrix::identity(d),
                    proj: DenseMatrix::zeros(d, d),
                    bias: DenseMatrix::zeros(1, d),
                },
            )],
        };
        let h = random_h(3, d, 2);
        let out = iv.apply(1, &h).unwrap();
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn update_is_confined_to_basis_row_space() {
        // (I - R^T R)(out - h) = 0: the edit has no component orthogonal to
        // the rows of R.
        let iv = Intervention::initialize(VariantKind::LoReft, 2, &[(1, 5)], RngKey::new(3)).unwrap();
        let mut iv = iv;
        // Perturb proj and bias so the edit is nonzero.
        if let LayerParams::LoReft { proj, bias, .. } = &mut iv.layers[0].1 {
            let mut s = RngKey::new(4).stream();
            *proj = DenseMatrix::filled(2, 5, |_, _| s.normal());
            *bias = DenseMatrix::filled(1, 2, |_, _| s.normal());
        }
        let h = random_h(6, 5, 5);
        let out = iv.apply(1, &h).unwrap();
        let delta = out.sub(&h).unwrap();
        assert!(delta.frob_norm() > 1e-3, "edit should be nonzero");
        let LayerParams::LoReft { basis, .. } = &iv.layers[0].1 else { unreachable!() };
        let projected = delta.matmul(&basis.transpose()).unwrap().matmul(basis).unwrap();
        let orthogonal_part = delta.sub(&projected).unwrap();
        assert!(orthogonal_part.max_abs() < 1e-10);
    }

    #[test]
    fn direft_and_uv_start_as_identity() {
        for kind in [VariantKind::DiReft, VariantKind::Uv] {
            let iv = Intervention::initialize(kind, 2, &[(1, 6)], RngKey::new(6)).unwrap();
            let h = random_h(4, 6, 7);
            let out = iv.apply(1, &h).unwrap();
            assert!(out.bits_eq(&h), "{} should start as identity", kind.name());
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_row_spaces() {
        let a = Intervention::initialize(VariantKind::LoReft, 2, &[(1, 8)], RngKey::new(10)).unwrap();
        let b = Intervention::initialize(VariantKind::LoReft, 2, &[(1, 8)], RngKey::new(11)).unwrap();
        let LayerParams::LoReft { basis: ra, .. } = &a.layers[0].1 else { unreachable!() };
        let LayerParams::LoReft { basis: rb, .. } = &b.layers[0].1 else { unreachable!() };
        // Projector difference norm > 0 iff the row spaces differ.
        let pa = ra.transpose().matmul(ra).unwrap();
        let pb = rb.transpose().matmul(rb).unwrap();
        assert!(pa.sub(&pb).unwrap().frob_norm() > 1e-3);
    }

    #[test]
    fn parameter_count_matches_formula_and_enumeration() {
        let iv =
            Intervention::initialize(VariantKind::LoReft, 4, &[(1, 64)], RngKey::new(12)).unwrap();
        assert_eq!(iv.parameter_count(), 2 * 4 * 64 + 4); // 516
        assert_eq!(
            Intervention::parameter_count_formula(VariantKind::LoReft, 4, &[64]),
            516
        );
        let uv = Intervention::initialize(VariantKind::Uv, 3, &[(1, 10), (2, 12)], RngKey::new(13))
            .unwrap();
        assert_eq!(uv.parameter_count(), 2 * 10 * 3 + 2 * 12 * 3);
        // Enumeration through a parameter store agrees.
        let mut store = ParamStore::new();
        let _refs = uv.register_params(&mut store);
        assert_eq!(store.trainable_scalar_count(), uv.parameter_count());
    }

    #[test]
    fn zero_rank_is_config_error() {
        assert!(matches!(
            Intervention::initialize(VariantKind::LoReft, 0, &[(1, 8)], RngKey::new(14)),
            Err(InterventionError::ZeroRank)
        ));
        assert!(matches!(
            Intervention::initialize(VariantKind::LoReft, 9, &[(1, 8)], RngKey::new(14)),
            Err(InterventionError::RankTooLarge { .. })
        ));
    }

    #[test]
    fn hook_passes_non_selected_rows_bit_identically() {
        let mut iv =
            Intervention::initialize(VariantKind::LoReft, 2, &[(1, 6)], RngKey::new(15)).unwrap();
        if let LayerParams::LoReft { bias, .. } = &mut iv.layers[0].1 {
            *bias = DenseMatrix::filled(1, 2, |_, j| 0.5 + j as f64);
        }
        let h = random_h(7, 6, 16);
        let mut mask = InterventionMask::empty(7);
        mask.selected[2] = true;
        mask.selected[5] = true;
        mask.probs[2] = 1.0;
        mask.probs[5] = 1.0;
        let mut hook = make_frozen_hook(&iv, &mask);
        let mut tape = Tape::new();
        let hid = tape.constant(&h);
        let out = hook(&mut tape, 1, hid).unwrap();
        let out_val = tape.value(out);
        for i in 0..7 {
            if i == 2 || i == 5 {
                assert!(out_val.row(i) != h.row(i));
            } else {
                assert_eq!(out_val.row(i), h.row(i));
            }
        }
    }

    #[test]
    fn empty_mask_hook_is_pass_through() {
        let iv = Intervention::initialize(VariantKind::LoReft, 2, &[(1, 6)], RngKey::new(17)).unwrap();
        let mask = InterventionMask::empty(4);
        let mut hook = make_frozen_hook(&iv, &mask);
        let h = random_h(4, 6, 18);
        let mut tape = Tape::new();
        let hid = tape.constant(&h);
        let out = hook(&mut tape, 1, hid).unwrap();
        assert_eq!(out, hid); // the very same tape node
    }

    #[test]
    fn retraction_restores_orthonormality() {
        let mut iv =
            Intervention::initialize(VariantKind::LoReft, 3, &[(1, 8)], RngKey::new(19)).unwrap();
        if let LayerParams::LoReft { basis, .. } = &mut iv.layers[0].1 {
            let mut s = RngKey::new(20).stream();
            let noise = DenseMatrix::filled(3, 8, |_, _| 0.05 * s.normal());
            *basis = basis.add(&noise).unwrap();
        }
        assert!(iv.basis_residual() > 1e-3);
        iv.retract().unwrap();
        assert!(iv.basis_residual() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for kind in [VariantKind::LoReft, VariantKind::DiReft, VariantKind::Uv] {
            let iv = Intervention::initialize(kind, 2, &[(1, 5), (2, 7)], RngKey::new(21)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("iv.ckpt");
            save_intervention(&path, &iv).unwrap();
            let loaded = load_intervention(&path).unwrap();
            assert_eq!(loaded.kind, iv.kind);
            assert_eq!(loaded.rank, iv.rank);
            let h = random_h(3, 5, 22);
            let a = iv.apply(1, &h).unwrap();
            let b = loaded.apply(1, &h).unwrap();
            assert!(a.bits_eq(&b));
        }
    }
}
