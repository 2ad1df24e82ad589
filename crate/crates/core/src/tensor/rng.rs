use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded stream of random draws. The same seed and call sequence always
/// yields the same values.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws taken so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed by `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.counter += 1;
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.counter += 1;
        self.inner.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.inner.random::<u64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (self.normal() * std) as f32).collect();
        Tensor::new(shape, data).expect("normal tensor shape")
    }
}
