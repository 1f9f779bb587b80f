//! Uncertainty-guided node selection: predictive entropy, a sigmoid gate,
//! and Bernoulli or top-fraction sampling of the intervention target set.

use crate::graph::SplitMasks;
use crate::kernel::{DenseMatrix, RngKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    /// Independent Bernoulli draw per candidate from its gate probability.
    Bernoulli,
    /// Deterministically take the `ceil(q * candidates)` highest-entropy
    /// candidates; ties broken by ascending node index.
    TopFraction(f64),
    /// Uniformly random `ceil(q * candidates)` candidates, ignoring the
    /// entropies; the control arm for selection ablations.
    RandomFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSet {
    TestOnly,
    AllNodes,
}

#[derive(Debug, Clone)]
pub struct SelectionConfig {
    /// Sharpness of the sigmoid gate.
    pub alpha_gate: f64,
    /// Fixed entropy threshold; `None` uses the median entropy over the
    /// candidate set, computed once per adaptation run.
    pub entropy_threshold: Option<f64>,
    pub mode: SelectionMode,
    pub candidate_set: CandidateSet,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha_gate: 10.0,
            entropy_threshold: None,
            mode: SelectionMode::Bernoulli,
            candidate_set: CandidateSet::TestOnly,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha_gate <= 0.0 {
            return Err(format!("alpha_gate must be positive, got {}", self.alpha_gate));
        }
        if let SelectionMode::TopFraction(q) | SelectionMode::RandomFraction(q) = self.mode {
            if !(0.0 < q && q <= 1.0) {
                return Err(format!("selection fraction must lie in (0, 1], got {q}"));
            }
        }
        Ok(())
    }

    pub fn candidates(&self, masks: &SplitMasks) -> Vec<usize> {
        match self.candidate_set {
            CandidateSet::TestOnly => masks.test_indices(),
            CandidateSet::AllNodes => (0..masks.test.len()).collect(),
        }
    }
}

/// Target-node mask with the gate probabilities that produced it. A node can
/// only be selected if its probability is positive, and never outside the
/// candidate set (non-candidates carry probability zero).
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionMask {
    pub selected: Vec<bool>,
    pub probs: Vec<f64>,
}

impl InterventionMask {
    pub fn empty(n: usize) -> Self {
        InterventionMask { selected: vec![false; n], probs: vec![0.0; n] }
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.selected[i]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    /// Selected node indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        SplitMasks::indices(&self.selected)
    }
}

/// Natural-log predictive entropy per row; `0 log 0` contributes zero.
pub fn predictive_entropy(proba: &DenseMatrix) -> Vec<f64> {
    (0..proba.rows())
        .map(|i| {
            -proba
                .row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Median over the candidate positions of an entropy vector; the default
/// data-dependent gate threshold.
pub fn median_entropy(entropies: &[f64], candidates: &[usize]) -> f64 {
    assert!(!candidates.is_empty(), "median over empty candidate set");
    let mut values: Vec<f64> = candidates.iter().map(|&i| entropies[i]).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate probabilities `sigmoid(alpha_gate * (E_i - threshold))`; monotone
/// nondecreasing in the entropy.
pub fn gate_probabilities(entropies: &[f64], threshold: f64, alpha_gate: f64) -> Vec<f64> {
    entropies
        .iter()
        .map(|&e| sigmoid(alpha_gate * (e - threshold)))
        .collect()
}

/// Sample the intervention target set from per-node gate probabilities,
/// restricted to `candidates`.
pub fn sample_mask(
    probs: &[f64],
    candidates: &[usize],
    mode: SelectionMode,
    key: RngKey,
) -> InterventionMask {
    let n = probs.len();
    let mut mask = InterventionMask::empty(n);
    for &i in candidates {
        mask.probs[i] = probs[i];
    }
    match mode {
        SelectionMode::Bernoulli => {
            let mut stream = key.stream();
            // One draw per node index, in ascending order, so the mask is a
            // pure function of (probs, candidates, key).
            let mut sorted: Vec<usize> = candidates.to_vec();
            sorted.sort_unstable();
            for i in sorted {
                if mask.probs[i] > 0.0 && stream.bernoulli(mask.probs[i]) {
                    mask.selected[i] = true;
                }
            }
        }
        SelectionMode::TopFraction(q) => {
            let take = ((q * candidates.len() as f64).ceil() as usize).min(candidates.len());
            let mut order: Vec<usize> = candidates.to_vec();
            // Highest probability first; ties by ascending node index.
            order.sort_by(|&a, &b| {
                mask.probs[b]
                    .partial_cmp(&mask.probs[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for &i in order.iter().take(take) {
                if mask.probs[i] > 0.0 {
                    mask.selected[i] = true;
                }
            }
        }
        SelectionMode::RandomFraction(q) => {
            let take = ((q * candidates.len() as f64).ceil() as usize).min(candidates.len());
            let mut order: Vec<usize> = candidates.to_vec();
            order.sort_unstable();
            key.stream().shuffle(&mut order);
            for &i in order.iter().take(take) {
                if mask.probs[i] > 0.0 {
                    mask.selected[i] = true;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_degenerate_and_uniform_rows() {
        let p = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.5, 0.25, 0.25, 0.0],
        ])
        .unwrap();
        let e = predictive_entropy(&p);
        assert!(e[0].abs() < 1e-15);
        assert!((e[1] - 4.0f64.ln()).abs() < 1e-12); // ln 4 = 1.386294...
        // Direct evaluation: -(0.5 ln 0.5 + 2 * 0.25 ln 0.25) = 1.039720...
        assert!((e[2] - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn gate_is_half_at_threshold_and_monotone() {
        let e = vec![0.3, 0.5, 0.8];
        let p = gate_probabilities(&e, 0.5, 10.0);
        assert!((p[1] - 0.5).abs() < 1e-15);
        assert!(p[0] < p[1] && p[1] < p[2]);
        // alpha_gate = 10, E - threshold = 0.5: sigmoid(5).
        let p5 = gate_probabilities(&[1.0], 0.5, 10.0)[0];
        assert!((p5 - 0.9933071490757153).abs() < 1e-12);
        // Monotone limit: very low entropy gives probability near zero.
        let lo = gate_probabilities(&[-100.0], 0.5, 10.0)[0];
        assert!(lo < 1e-12);
    }

    #[test]
    fn degenerate_probabilities_give_trivial_masks() {
        let candidates: Vec<usize> = (0..10).collect();
        let zeros = vec![0.0; 10];
        let mask = sample_mask(&zeros, &candidates, SelectionMode::Bernoulli, RngKey::new(0));
        assert_eq!(mask.count(), 0);
        let ones = vec![1.0; 10];
        let mask = sample_mask(&ones, &candidates, SelectionMode::Bernoulli, RngKey::new(0));
        assert_eq!(mask.indices(), candidates);
    }

    #[test]
    fn bernoulli_fraction_concentrates() {
        let n = 10_000;
        let probs = vec![0.5; n];
        let candidates: Vec<usize> = (0..n).collect();
        let mask = sample_mask(&probs, &candidates, SelectionMode::Bernoulli, RngKey::new(1));
        let frac = mask.count() as f64 / n as f64;
        assert!((0.47..=0.53).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn top_fraction_is_deterministic_with_index_ties() {
        let probs = vec![0.9, 0.1, 0.9, 0.9, 0.5];
        let candidates: Vec<usize> = (0..5).collect();
        let mask = sample_mask(&probs, &candidates, SelectionMode::TopFraction(0.4), RngKey::new(2));
        // ceil(0.4 * 5) = 2; ties between nodes 0, 2, 3 resolve ascending.
        assert_eq!(mask.indices(), vec![0, 2]);
    }

    #[test]
    fn mask_never_leaves_candidate_set() {
        let probs = vec![1.0; 8];
        let candidates = vec![2, 5, 7];
        for mode in [SelectionMode::Bernoulli, SelectionMode::TopFraction(1.0)] {
            let mask = sample_mask(&probs, &candidates, mode, RngKey::new(3));
            for i in mask.indices() {
                assert!(candidates.contains(&i));
            }
            assert!(mask.probs[0] == 0.0 && mask.probs[1] == 0.0);
        }
    }

    #[test]
    fn median_entropy_handles_even_and_odd() {
        let e = vec![0.1, 0.5, 0.9, 0.3];
        assert!((median_entropy(&e, &[0, 1, 2]) - 0.5).abs() < 1e-15);
        assert!((median_entropy(&e, &[0, 1, 2, 3]) - 0.4).abs() < 1e-15);
    }
}
