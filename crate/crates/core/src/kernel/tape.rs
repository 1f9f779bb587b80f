//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Values are computed eagerly as operations are pushed; `backward` replays
//! the record in reverse. Leaves marked trainable receive gradients, constant
//! leaves never do, gradient reachability is tracked at construction so the
//! backward pass skips subtrees with no trainable ancestors entirely. The
//! tape is rebuilt for every loss evaluation (masking resamples per epoch, so
//! the computation graph changes shape).

use std::sync::Arc;

use super::dense::{softmax_rows, DenseMatrix};
use super::sparse::SparseAdjacency;
use super::KernelError;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Hadamard(VarId, VarId),
    Scale(VarId, f64),
    MatMul(VarId, VarId),
    Transpose(VarId),
    AddRowBroadcast { input: VarId, bias: VarId },
    Spmm { adj: Arc<SparseAdjacency>, input: VarId },
    Relu(VarId),
    SoftmaxRows(VarId),
    SumAll(VarId),
    GatherRows { input: VarId, rows: Arc<[usize]> },
    ScatterRows { base: VarId, rows: Arc<[usize]>, values: VarId },
    MaskRowsWithToken { input: VarId, token: VarId, rows: Arc<[usize]> },
    MeanCrossEntropy { logits: VarId, labels: Arc<[usize]>, rows: Arc<[usize]> },
    MeanEntropy { logits: VarId, rows: Arc<[usize]> },
    ScaledCosineError { target: Arc<DenseMatrix>, pred: VarId, rows: Arc<[usize]>, gamma: f64, counted: usize },
}

struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `id`, if any
    /// gradient reached it. Constant leaves always return `None`.
    pub fn of(&self, id: VarId) -> Option<&DenseMatrix> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op, trainable: bool) -> VarId {
        let needs_grad = trainable || self.op_inputs_need_grad(&op);
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn op_inputs_need_grad(&self, op: &Op) -> bool {
        let needs = |id: &VarId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) | Op::MatMul(a, b) => {
                needs(a) || needs(b)
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a) => needs(a),
            Op::AddRowBroadcast { input, bias } => needs(input) || needs(bias),
            Op::Spmm { input, .. } => needs(input),
            Op::GatherRows { input, .. } => needs(input),
            Op::ScatterRows { base, values, .. } => needs(base) || needs(values),
            Op::MaskRowsWithToken { input, token, .. } => needs(input) || needs(token),
            Op::MeanCrossEntropy { logits, .. }
            | Op::MeanEntropy { logits, .. } => needs(logits),
            Op::ScaledCosineError { pred, .. } => needs(pred),
        }
    }

    /// Register a trainable leaf (parameter).
    pub fn leaf(&mut self, value: &DenseMatrix) -> VarId {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Register a constant leaf; no gradient will ever flow to it.
    pub fn constant(&mut self, value: &DenseMatrix) -> VarId {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, KernelError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, KernelError> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), false))
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId, KernelError> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b), false))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, KernelError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), false))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), false)
    }

    pub fn add_row_broadcast(&mut self, input: VarId, bias: VarId) -> Result<VarId, KernelError> {
        let value = self.value(input).add_row_broadcast(self.value(bias))?;
        Ok(self.push(value, Op::AddRowBroadcast { input, bias }, false))
    }

    /// Sparse-dense product; differentiable with respect to the dense input.
    pub fn spmm(&mut self, adj: &Arc<SparseAdjacency>, input: VarId) -> Result<VarId, KernelError> {
        let value = adj.matmul_dense(self.value(input))?;
        Ok(self.push(value, Op::Spmm { adj: Arc::clone(adj), input }, false))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(a), false)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), false)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let total: f64 = self.value(a).data().iter().sum();
        let value = DenseMatrix::from_vec(1, 1, vec![total]).unwrap_or_else(|_| {
            // Non-finite sums stay representable so divergence is observable.
            DenseMatrix::filled(1, 1, |_, _| total)
        });
        self.push(value, Op::SumAll(a), false)
    }

    /// Select the given rows, in order, into a `rows.len() x cols` matrix.
    pub fn gather_rows(&mut self, input: VarId, rows: &Arc<[usize]>) -> Result<VarId, KernelError> {
        let src = self.value(input);
        if let Some(&bad) = rows.iter().find(|&&r| r >= src.rows()) {
            return Err(KernelError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {} rows", src.rows()),
            });
        }
        let cols = src.cols();
        let mut value = DenseMatrix::zeros(rows.len(), cols);
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(k).copy_from_slice(src.row(r));
        }
        Ok(self.push(value, Op::GatherRows { input, rows: Arc::clone(rows) }, false))
    }

    /// Copy `base`, replacing row `rows[k]` with row `k` of `values`.
    /// Untouched rows are bit-identical to `base`.
    pub fn scatter_rows(
        &mut self,
        base: VarId,
        rows: &Arc<[usize]>,
        values: VarId,
    ) -> Result<VarId, KernelError> {
        let (b, v) = (self.value(base), self.value(values));
        if v.rows() != rows.len() || v.cols() != b.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("values {:?} for {} rows of width {}", v.shape(), rows.len(), b.cols()),
            });
        }
        let mut value = b.clone();
        for (k, &r) in rows.iter().enumerate() {
            let src: Vec<f64> = self.value(values).row(k).to_vec();
            value.row_mut(r).copy_from_slice(&src);
        }
        Ok(self.push(value, Op::ScatterRows { base, rows: Arc::clone(rows), values }, false))
    }

    /// Replace the given rows with a learnable `1 x cols` token; other rows
    /// pass through bit-identically.
    pub fn mask_rows_with_token(
        &mut self,
        input: VarId,
        token: VarId,
        rows: &Arc<[usize]>,
    ) -> Result<VarId, KernelError> {
        let (x, t) = (self.value(input), self.value(token));
        if t.rows() != 1 || t.cols() != x.cols() {
            return Err(KernelError::ShapeMismatch {
                op: "mask_rows_with_token",
                detail: format!("token {:?} for matrix {:?}", t.shape(), x.shape()),
            });
        }
        let token_row: Vec<f64> = t.row(0).to_vec();
        let mut value = x.clone();
        for &r in rows.iter() {
            value.row_mut(r).copy_from_slice(&token_row);
        }
        Ok(self.push(value, Op::MaskRowsWithToken { input, token, rows: Arc::clone(rows) }, false))
    }

    /// Mean cross-entropy of `logits` against integer `labels`, restricted to
    /// the node indices in `rows`.
    pub fn mean_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &Arc<[usize]>,
        rows: &Arc<[usize]>,
    ) -> Result<VarId, KernelError> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(KernelError::ShapeMismatch {
                op: "mean_cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), z.rows()),
            });
        }
        if rows.is_empty() {
            return Err(KernelError::ShapeMismatch {
                op: "mean_cross_entropy",
                detail: "empty row set".into(),
            });
        }
        let mut total = 0.0;
        for &r in rows.iter() {
            let row = z.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let value = DenseMatrix::filled(1, 1, |_, _| total / rows.len() as f64);
        Ok(self.push(
            value,
            Op::MeanCrossEntropy { logits, labels: Arc::clone(labels), rows: Arc::clone(rows) },
            false,
        ))
    }

    /// Mean predictive entropy of softmaxed `logits` over the given rows.
    pub fn mean_entropy(&mut self, logits: VarId, rows: &Arc<[usize]>) -> Result<VarId, KernelError> {
        if rows.is_empty() {
            return Err(KernelError::ShapeMismatch {
                op: "mean_entropy",
                detail: "empty row set".into(),
            });
        }
        let z = self.value(logits);
        let mut total = 0.0;
        for &r in rows.iter() {
            let row = z.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            // -sum p log p with log p = z - lse.
            total -= row.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>();
        }
        let value = DenseMatrix::filled(1, 1, |_, _| total / rows.len() as f64);
        Ok(self.push(value, Op::MeanEntropy { logits, rows: Arc::clone(rows) }, false))
    }

    /// Scaled cosine error between target rows and predicted rows, averaged
    /// over `rows`. Rows where either side has (near-)zero norm are excluded
    /// from the average; the second return value counts them.
    pub fn scaled_cosine_error(
        &mut self,
        target: &Arc<DenseMatrix>,
        pred: VarId,
        rows: &Arc<[usize]>,
        gamma: f64,
    ) -> Result<(VarId, usize), KernelError> {
        let z = self.value(pred);
        if target.shape() != z.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "scaled_cosine_error",
                detail: format!("target {:?} vs pred {:?}", target.shape(), z.shape()),
            });
        }
        if rows.is_empty() {
            return Err(KernelError::ShapeMismatch {
                op: "scaled_cosine_error",
                detail: "empty masked set".into(),
            });
        }
        if gamma < 1.0 {
            return Err(KernelError::ShapeMismatch {
                op: "scaled_cosine_error",
                detail: format!("gamma {gamma} < 1"),
            });
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for &r in rows.iter() {
            let (x, zr) = (target.row(r), z.row(r));
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nz = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx < 1e-12 || nz < 1e-12 {
                continue;
            }
            let dot: f64 = x.iter().zip(zr).map(|(a, b)| a * b).sum();
            total += (1.0 - dot / (nx * nz)).powf(gamma);
            counted += 1;
        }
        if counted == 0 {
            return Err(KernelError::ShapeMismatch {
                op: "scaled_cosine_error",
                detail: "all masked rows have zero norm".into(),
            });
        }
        let skipped = rows.len() - counted;
        let value = DenseMatrix::filled(1, 1, |_, _| total / counted as f64);
        let id = self.push(
            value,
            Op::ScaledCosineError {
                target: Arc::clone(target),
                pred,
                rows: Arc::clone(rows),
                gamma,
                counted,
            },
            false,
        );
        Ok((id, skipped))
    }

    /// Reverse pass from a scalar output. Every node is visited exactly once,
    /// in reverse construction order.
    pub fn backward(&self, output: VarId) -> Result<Gradients, KernelError> {
        if self.value(output).shape() != (1, 1) {
            return Err(KernelError::NonScalarOutput {
                shape: self.value(output).shape(),
            });
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // Leaves keep their accumulated gradient; interior nodes drop it.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<(), KernelError> {
        let acc = |grads: &mut [Option<DenseMatrix>], id: VarId, delta: DenseMatrix| {
            match &mut grads[id.0] {
                Some(existing) => {
                    *existing = existing.add(&delta).expect("gradient shapes match");
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |id: &VarId| self.nodes[id.0].needs_grad;

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    acc(grads, *a, g.clone());
                }
                if needs(b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc(grads, *a, g.clone());
                }
                if needs(b) {
                    acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Hadamard(a, b) => {
                if needs(a) {
                    acc(grads, *a, g.hadamard(self.value(*b))?);
                }
                if needs(b) {
                    acc(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    acc(grads, *a, g.scale(*s));
                }
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(grads, *a, g.matmul(&self.value(*b).transpose())?);
                }
                if needs(b) {
                    acc(grads, *b, self.value(*a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    acc(grads, *a, g.transpose());
                }
            }
            Op::AddRowBroadcast { input, bias } => {
                if needs(input) {
                    acc(grads, *input, g.clone());
                }
                if needs(bias) {
                    let mut col_sum = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, s) in col_sum.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    acc(grads, *bias, col_sum);
                }
            }
            Op::Spmm { adj, input } => {
                if needs(input) {
                    acc(grads, *input, adj.matmul_dense_transposed(g)?);
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let x = self.value(*a);
                    let mut dg = g.clone();
                    for (d, v) in dg.data_mut().iter_mut().zip(x.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(grads, *a, dg);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let p = &self.nodes[idx].value;
                    let mut dg = DenseMatrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let dot: f64 = g.row(i).iter().zip(p.row(i)).map(|(x, y)| x * y).sum();
                        for (d, (gv, pv)) in
                            dg.row_mut(i).iter_mut().zip(g.row(i).iter().zip(p.row(i)))
                        {
                            *d = pv * (gv - dot);
                        }
                    }
                    acc(grads, *a, dg);
                }
            }
            Op::SumAll(a) => {
                if needs(a) {
                    let s = g.get(0, 0);
                    let src = self.value(*a);
                    acc(grads, *a, DenseMatrix::filled(src.rows(), src.cols(), |_, _| s));
                }
            }
            Op::GatherRows { input, rows } => {
                if needs(input) {
                    let src = self.value(*input);
                    let mut dg = DenseMatrix::zeros(src.rows(), src.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, s) in dg.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    acc(grads, *input, dg);
                }
            }
            Op::ScatterRows { base, rows, values } => {
                if needs(base) {
                    let mut dg = g.clone();
                    for &r in rows.iter() {
                        dg.row_mut(r).fill(0.0);
                    }
                    acc(grads, *base, dg);
                }
                if needs(values) {
                    let mut dv = DenseMatrix::zeros(rows.len(), g.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        dv.row_mut(k).copy_from_slice(g.row(r));
                    }
                    acc(grads, *values, dv);
                }
            }
            Op::MaskRowsWithToken { input, token, rows } => {
                if needs(input) {
                    let mut dg = g.clone();
                    for &r in rows.iter() {
                        dg.row_mut(r).fill(0.0);
                    }
                    acc(grads, *input, dg);
                }
                if needs(token) {
                    let mut dt = DenseMatrix::zeros(1, g.cols());
                    for &r in rows.iter() {
                        for (d, s) in dt.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(grads, *token, dt);
                }
            }
            Op::MeanCrossEntropy { logits, labels, rows } => {
                if needs(logits) {
                    let z = self.value(*logits);
                    let scale = g.get(0, 0) / rows.len() as f64;
                    let mut dg = DenseMatrix::zeros(z.rows(), z.cols());
                    for &r in rows.iter() {
                        let row = z.row(r);
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, (d, v)) in dg.row_mut(r).iter_mut().zip(row).enumerate() {
                            let p = (v - max).exp() / sum;
                            *d = scale * (p - if j == labels[r] { 1.0 } else { 0.0 });
                        }
                    }
                    acc(grads, *logits, dg);
                }
            }
            Op::MeanEntropy { logits, rows } => {
                if needs(logits) {
                    let z = self.value(*logits);
                    let scale = g.get(0, 0) / rows.len() as f64;
                    let mut dg = DenseMatrix::zeros(z.rows(), z.cols());
                    for &r in rows.iter() {
                        let row = z.row(r);
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        let entropy: f64 =
                            -row.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>();
                        for (d, v) in dg.row_mut(r).iter_mut().zip(row) {
                            let logp = v - lse;
                            *d = -scale * logp.exp() * (logp + entropy);
                        }
                    }
                    acc(grads, *logits, dg);
                }
            }
            Op::ScaledCosineError { target, pred, rows, gamma, counted } => {
                if needs(pred) {
                    let z = self.value(*pred);
                    let scale = g.get(0, 0) / *counted as f64;
                    let mut dg = DenseMatrix::zeros(z.rows(), z.cols());
                    for &r in rows.iter() {
                        let (x, zr) = (target.row(r), z.row(r));
                        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nz = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if nx < 1e-12 || nz < 1e-12 {
                            continue;
                        }
                        let dot: f64 = x.iter().zip(zr).map(|(a, b)| a * b).sum();
                        let cos = dot / (nx * nz);
                        // d/dz (1 - cos)^gamma = gamma (1 - cos)^(gamma-1) * (-dcos/dz)
                        // dcos/dz = x / (nx nz) - cos z / nz^2
                        let outer = gamma * (1.0 - cos).powf(gamma - 1.0) * scale;
                        for (j, d) in dg.row_mut(r).iter_mut().enumerate() {
                            let dcos = x[j] / (nx * nz) - cos * zr[j] / (nz * nz);
                            *d = -outer * dcos;
                        }
                    }
                    acc(grads, *pred, dg);
                }
            }
        }
        Ok(())
    }
}
