//! Shared fixtures for the kernel benchmarks.

use diffwatch_core::numcore::init::standard_normal;
use diffwatch_core::seed::rng_from;
use diffwatch_core::{DenoiserModel, Tensor, UNetConfig};

/// Random `f32` tensor with a fixed seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    standard_normal::<f32, _>(shape, &mut rng_from(seed))
}

/// Desk-scale network with a batch of inputs: `(model, noisy, cond, ts)`.
pub fn desk_inputs(batch: usize) -> (DenoiserModel<f32>, Tensor<f32>, Tensor<f32>, Vec<usize>) {
    let cfg = UNetConfig::desk();
    let (h, w) = (cfg.height, cfg.width);
    let noisy = random(&[batch, cfg.noisy_channels(), h, w], 1);
    let cond = random(&[batch, cfg.cond_channels(), h, w], 2);
    let ts = (0..batch).map(|i| 1 + (i * 37) % 100).collect();
    let model = DenoiserModel::new(cfg, 0).expect("desk config is valid");
    (model, noisy, cond, ts)
}
