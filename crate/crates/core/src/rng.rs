//! Seeded counter-based random streams.
//!
//! Every stochastic draw names its stream explicitly. A stream is a ChaCha8
//! keystream keyed by the 64-bit seed and addressed by a 64-bit stream id, so
//! two draws with the same `(seed, stream)` always agree no matter how many
//! other streams were consumed in between or on which thread.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// Stream identifier: a domain tag in the top 16 bits, an index below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId(pub u64);

impl StreamId {
    pub const fn new(domain: Domain, index: u64) -> Self {
        StreamId(((domain as u64) << 48) | (index & 0xFFFF_FFFF_FFFF))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Domain {
    /// Initial latent z_T of a sampling run.
    Latent = 1,
    /// Per-step DDPM noise, indexed by step.
    StepNoise = 2,
    /// Forward-process noise w.
    ForwardNoise = 3,
    /// Parameter initialisation.
    Init = 4,
    /// Training batch composition, indexed by optimizer step.
    Training = 5,
    /// Procedural scene generation.
    Scene = 6,
    /// Evaluation-only draws.
    Eval = 7,
}

pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.0);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_tensor<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::lit(self.normal())).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape product matches length")
    }
}

/// Unit Gaussian tensor drawn from one named stream.
pub fn gaussian<F: Scalar>(seed: u64, stream: StreamId, shape: &[usize]) -> Tensor<F> {
    Rng::new(seed, stream).normal_tensor(shape)
}
