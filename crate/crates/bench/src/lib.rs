//! Seeded inputs for the kernel benchmarks.

use gid_core::rng;
use gid_core::{CostMatrix, SyntheticSpec};
use ndarray::Array2;
use rand::Rng;

pub fn random_cost(k: usize, seed: u64) -> CostMatrix {
    let mut r = rng::seeded(seed);
    CostMatrix::from_flat(k, (0..k * k).map(|_| r.random_range(0..1000) as f64).collect()).unwrap()
}

pub fn random_logits(batch: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_fn((batch, m), |_| r.random_range(-3.0..3.0))
}

/// Gaussian blobs as plain rows.
pub fn blobs(k: usize, per: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let ds = gid_core::generate_synthetic(&SyntheticSpec {
        num_classes: k,
        samples_per_class: per,
        dim,
        class_separation: 4.0,
        within_class_std: 1.0,
        domains: None,
        seed,
    })
    .unwrap();
    ds.samples
        .iter()
        .map(|s| s.vector.iter().map(|&v| v as f64).collect())
        .collect()
}
