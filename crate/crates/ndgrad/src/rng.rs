//! Seeded random streams. Each owner holds its own stream; derived streams
//! come from [`RngStream::fork`] so that adding draws in one place never
//! shifts the sequence seen elsewhere.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finaliser, used to spread child seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream determined by this stream's seed and `tag`.
    pub fn fork(&self, tag: u64) -> Self {
        Self::seeded(mix(self.seed ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `(0, 1]`, safe to take the logarithm of.
    fn open_uniform(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Laplace(0, 1) by inverse CDF.
    pub fn standard_laplace(&mut self) -> f64 {
        let u = self.uniform() - 0.5;
        let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln();
        if u < 0.0 {
            -mag
        } else {
            mag
        }
    }

    pub fn standard_exponential(&mut self) -> f64 {
        -self.open_uniform().ln()
    }

    /// Gamma(k = 2, θ = 1) as the sum of two unit exponentials.
    pub fn standard_gamma_shape2(&mut self) -> f64 {
        self.standard_exponential() + self.standard_exponential()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn laplaces(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_laplace()).collect()
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
