//! Counter-based PRNG and seeded Gaussian sampling.
//!
//! The generator is SplitMix64 used in counter mode: output `i` of stream
//! `seed` is `mix64(seed + (i+1) * GOLDEN)` where `mix64` is the SplitMix64
//! finalizer. There is no mutable hidden state beyond the counter, so any
//! element of any stream can be computed independently and the byte stream
//! is identical across runs for the same `(seed, index)`.
//!
//! Gaussians come from Box–Muller over consecutive counter pairs.

use super::{Result, Tensor, TensorError};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Raw 64-bit output `index` of stream `seed`.
pub fn raw(seed: u64, index: u64) -> u64 {
    mix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Derive a child seed from a parent seed and a tag path. Used to give every
/// training step, sample and purpose its own independent stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed;
    for (i, &t) in tags.iter().enumerate() {
        s = mix64(s ^ raw(t, i as u64));
    }
    s
}

/// Counter-mode stream with a cursor, for sequential draws.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    cursor: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { seed, cursor: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = raw(self.seed, self.cursor);
        self.cursor += 1;
        v
    }

    /// Uniform in (0, 1]: 53 mantissa bits, shifted so 0 is excluded
    /// (Box–Muller takes a log of this value).
    pub fn next_unit_open(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Desk-scale n (< 2^32): modulo bias is negligible and determinism
        // matters more than perfect uniformity here.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller.
    pub fn next_gauss(&mut self) -> f64 {
        let u1 = self.next_unit_open();
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Reproducible standard-normal tensor: same `(shape, seed)`, same bytes.
pub fn seeded_randn(shape: &[usize], seed: u64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut stream = Stream::new(seed);
    let mut data = Vec::with_capacity(numel);
    // Box–Muller yields pairs; draw both so the counter advances uniformly.
    while data.len() < numel {
        let u1 = stream.next_unit_open();
        let u2 = stream.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        data.push((r * theta.cos()) as f32);
        if data.len() < numel {
            data.push((r * theta.sin()) as f32);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Seeded uniform tensor in `[lo, hi)`, used for toy inputs in tests.
pub fn seeded_uniform(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Result<Tensor> {
    if hi <= lo || !lo.is_finite() || !hi.is_finite() {
        return Err(TensorError::Invalid {
            op: "seeded_uniform",
            msg: format!("empty range [{lo}, {hi})"),
        });
    }
    let numel: usize = shape.iter().product();
    let mut stream = Stream::new(seed);
    let data = (0..numel)
        .map(|_| stream.next_range(lo as f64, hi as f64) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn randn_deterministic() {
        let a = seeded_randn(&[3, 5], 42);
        let b = seeded_randn(&[3, 5], 42);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn randn_seeds_differ() {
        let a = seeded_randn(&[16], 42);
        let b = seeded_randn(&[16], 43);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn randn_moments_at_1e5() {
        let t = seeded_randn(&[100_000], 42);
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = t
            .data()
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn counter_access_is_stateless() {
        let mut s = Stream::new(7);
        let seq: Vec<u64> = (0..4).map(|_| s.next_u64()).collect();
        let direct: Vec<u64> = (0..4).map(|i| raw(7, i)).collect();
        assert_eq!(seq, direct);
    }

    #[test]
    fn derive_seed_separates_tags() {
        let a = derive_seed(42, &[1, 2]);
        let b = derive_seed(42, &[2, 1]);
        let c = derive_seed(42, &[1, 2]);
        assert_eq!(a, c);
        assert_ne!(a, b);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..50).collect();
        Stream::new(9).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
