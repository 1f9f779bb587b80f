//! Splittable counter-based random number generation.
//!
//! Every stochastic step in the pipeline (initialization, Bernoulli masks,
//! synthetic graphs) draws from an explicitly threaded [`RngKey`], so a run is
//! fully determined by its seed. Keys are pure values: `child` derives an
//! independent key without mutating the parent, and a [`RngStream`] generates
//! the actual draws by hashing `(key, counter)` pairs. The mixer is the
//! splitmix64 finalizer, chosen because it is trivial to reproduce in any
//! language.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Immutable seed value; split into children or opened as a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey(u64);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(mix64(seed.wrapping_add(GOLDEN_GAMMA)))
    }

    /// Derive an independent child key. Distinct tags give distinct keys.
    pub fn child(&self, tag: u64) -> Self {
        RngKey(mix64(
            self.0 ^ mix64(tag.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1)),
        ))
    }

    pub fn stream(&self) -> RngStream {
        RngStream { key: self.0, counter: 0 }
    }
}

/// Stateful draw sequence over a key: output `i` is `mix64(key ^ mix64(i))`.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key ^ mix64(self.counter.wrapping_add(GOLDEN_GAMMA)));
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (two draws per sample, no cached spare).
    pub fn normal(&mut self) -> f64 {
        // First uniform shifted into (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `[0, n)`; `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift keeps the bias below 2^-64 for desk-scale n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = RngKey::new(7).stream().by_ref_take(10);
        let b: Vec<u64> = RngKey::new(7).stream().by_ref_take(10);
        assert_eq!(a, b);
    }

    #[test]
    fn children_differ_from_parent_and_each_other() {
        let k = RngKey::new(3);
        let c0 = k.child(0);
        let c1 = k.child(1);
        assert_ne!(k, c0);
        assert_ne!(c0, c1);
        assert_ne!(
            c0.stream().next_u64_pair(),
            c1.stream().next_u64_pair()
        );
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = RngKey::new(11).stream();
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut s = RngKey::new(5).stream();
        let n = 50_000;
        let samples: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn index_is_in_range() {
        let mut s = RngKey::new(9).stream();
        for _ in 0..1000 {
            assert!(s.index(17) < 17);
        }
    }

    impl RngStream {
        fn by_ref_take(mut self, n: usize) -> Vec<u64> {
            (0..n).map(|_| self.next_u64()).collect()
        }
        fn next_u64_pair(mut self) -> (u64, u64) {
            (self.next_u64(), self.next_u64())
        }
    }
}
