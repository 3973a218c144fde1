//! Finite-difference oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use metainfluence::linalg::norm;
use metainfluence::taskgen::sample_taskset;
use metainfluence::{
    Activation, Learner, MetaParams, MlpSpec, Task, TaskDistributionSpec, TaskKind,
};

/// Central-difference gradient of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|j| {
            let x0 = x[j];
            x[j] = x0 + h;
            let up = f(&x);
            x[j] = x0 - h;
            let dn = f(&x);
            x[j] = x0;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Central-difference directional derivative of a vector function.
pub fn fd_jvp(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + s * b).collect() };
    let up = f(&shifted(h));
    let dn = f(&shifted(-h));
    up.iter()
        .zip(&dn)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

/// `‖a−b‖ / max(‖b‖, floor)`
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(floor)
}

pub fn clustered(
    dim: usize,
    n_ways: usize,
    k_support: usize,
    k_query: usize,
    seed: u64,
) -> TaskDistributionSpec {
    TaskDistributionSpec {
        kind: TaskKind::Clustered {
            dim,
            n_ways,
            k_support,
            k_query,
            class_center_scale: 1.0,
            within_class_noise: 0.5,
        },
        seed,
    }
}

pub fn tasks(dim: usize, n_ways: usize, count: usize, seed: u64) -> Vec<Task> {
    sample_taskset(&clustered(dim, n_ways, 3, 4, seed), count).unwrap()
}

pub fn tanh_params(widths: Vec<usize>, learner: Learner, seed: u64) -> MetaParams {
    MetaParams::initialize(
        MlpSpec::new(widths, Activation::Tanh).unwrap(),
        learner,
        seed,
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
