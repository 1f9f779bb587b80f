//! Adam optimizer over a store of named parameters.

use super::dense::DenseMatrix;
use super::tape::{Gradients, Tape, VarId};
use super::KernelError;

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

impl ParamRef {
    /// Position in the store's registration order; aligns with the leaf
    /// vector produced by [`ParamStore::tape_leaves`].
    pub fn index(&self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: DenseMatrix,
    frozen: bool,
}

/// Owns the canonical parameter values across tape rebuilds. The tape is
/// reconstructed every epoch; the store is not.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamRef {
        self.entries.push(ParamEntry { name: name.into(), value, frozen: false });
        ParamRef(self.entries.len() - 1)
    }

    pub fn register_frozen(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamRef {
        self.entries.push(ParamEntry { name: name.into(), value, frozen: true });
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.0].name
    }

    pub fn value(&self, r: ParamRef) -> &DenseMatrix {
        &self.entries[r.0].value
    }

    pub fn set_value(&mut self, r: ParamRef, value: DenseMatrix) {
        debug_assert_eq!(self.entries[r.0].value.shape(), value.shape());
        self.entries[r.0].value = value;
    }

    pub fn is_frozen(&self, r: ParamRef) -> bool {
        self.entries[r.0].frozen
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.entries.len()).map(ParamRef)
    }

    /// Total number of scalar entries across non-frozen parameters.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.value.len()).sum()
    }

    /// Register every non-frozen parameter as a trainable tape leaf and every
    /// frozen one as a constant. Returns the leaf ids aligned with `refs()`.
    pub fn tape_leaves(&self, tape: &mut Tape) -> Vec<VarId> {
        self.entries
            .iter()
            .map(|e| {
                if e.frozen {
                    tape.constant(&e.value)
                } else {
                    tape.leaf(&e.value)
                }
            })
            .collect()
    }
}

/// Adam state with bias correction. Moment buffers are allocated lazily per
/// parameter and always match the parameter's shape.
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Option<DenseMatrix>>,
    second: Vec<Option<DenseMatrix>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::with_hyperparams(0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { beta1, beta2, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one Adam update from tape gradients. Parameters without a
    /// gradient this epoch are left untouched (moments included); frozen
    /// parameters are never modified. A non-finite gradient aborts before any
    /// parameter is mutated.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        leaves: &[VarId],
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), KernelError> {
        for (r, &leaf) in store.refs().zip(leaves) {
            if let Some(g) = grads.of(leaf) {
                if !g.all_finite() {
                    return Err(KernelError::NanGradient { param: store.name(r).to_string() });
                }
            }
        }
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize_with(store.len(), || None);
            self.second.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (r, &leaf) in store.refs().zip(leaves) {
            if store.is_frozen(r) {
                continue;
            }
            let Some(g) = grads.of(leaf) else { continue };
            let shape = store.value(r).shape();
            let m = self.first[r.0].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
            let v = self.second[r.0].get_or_insert_with(|| DenseMatrix::zeros(shape.0, shape.1));
            let value = store.value(r).clone();
            let mut updated = value;
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                updated.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            store.set_value(r, updated);
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}
