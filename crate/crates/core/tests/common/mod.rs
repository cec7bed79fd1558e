#![allow(dead_code)]

use atnf_core::denoiser::{Denoiser, DenoiserConfig};
use atnf_core::rng::{gaussian, StreamId};
use atnf_core::Scalar;

/// Tiny network whose zero-initialised layers are filled with noise, so that
/// every input influences the output.
pub fn random_net<F: Scalar>(seed: u64) -> Denoiser<F> {
    let mut net = Denoiser::<F>::new(DenoiserConfig::tiny(), seed).unwrap();
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let shape = net.params().value(id).shape().to_vec();
        let noise = gaussian::<F>(seed, StreamId(1000 + id.0 as u64), &shape);
        let v = net.params_mut().value_mut(id);
        *v = v.zip_map(&noise, |a, n| a + F::lit(0.2) * n).unwrap();
    }
    net
}
