//! Counter-based pseudo-random streams.
//!
//! Every draw is a pure function of `(key, counter)`:
//!
//! ```text
//! x   = key + (counter + 1) * 0x9E3779B97F4A7C15        (mod 2^64)
//! x   = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//! x   = (x ^ (x >> 27)) * 0x94D049BB133111EB
//! out = x ^ (x >> 31)
//! ```
//!
//! This is the SplitMix64 finalizer applied to a Weyl sequence, so the stream
//! is identical to SplitMix64 seeded with `key`. Child streams are keyed by
//! folding labels into the parent key with the same finalizer, which makes
//! a client's stream depend only on `(seed, round, client)` and never on
//! execution order.
//!
//! Floating-point draws: `uniform = (out >> 11) * 2^-53`. Normals use the
//! Box-Muller transform (one normal per two uniforms, no caching). Gamma
//! variates use Marsaglia-Tsang; shapes below one are boosted with
//! `G(a) = G(a + 1) * U^(1/a)`, evaluated in log space.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(MIX_1);
    x = (x ^ (x >> 27)).wrapping_mul(MIX_2);
    x ^ (x >> 31)
}

/// Derives a stream key from a seed and a path of labels.
pub fn derive_key(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix64(seed ^ GOLDEN_GAMMA), |key, &label| {
        mix64(key.wrapping_add(GOLDEN_GAMMA).wrapping_add(mix64(label)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key, counter: 0 }
    }

    /// Stream for a seed and a label path, e.g. `(seed, [round, client])`.
    pub fn from_path(seed: u64, labels: &[u64]) -> Self {
        CounterRng::new(derive_key(seed, labels))
    }

    /// An independent child stream; does not advance `self`.
    pub fn child(&self, label: u64) -> Self {
        CounterRng::new(derive_key(self.key, &[label]))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`, safe to take the logarithm of.
    fn next_open_f64(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection, unbiased. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Natural log of a Gamma(shape, 1) variate. `shape` must be positive.
    pub fn log_gamma_variate(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let boosted = self.log_gamma_variate(shape + 1.0);
            return boosted + self.next_open_f64().ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_open_f64();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return (d * v).ln();
            }
        }
    }

    /// Symmetric Dirichlet(concentration * 1_k) draw, normalized in log
    /// space so tiny concentrations do not underflow to an all-zero vector.
    pub fn dirichlet(&mut self, concentration: f64, k: usize) -> Vec<f64> {
        let logs: Vec<f64> = (0..k)
            .map(|_| self.log_gamma_variate(concentration))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }
}
