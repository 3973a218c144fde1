//! Fixtures shared by the kernel benchmarks.

use metainfluence::taskgen::sample_taskset;
use metainfluence::{
    Activation, Learner, Matrix, MetaParams, MlpSpec, SymMatrix, Task, TaskDistributionSpec, TaskKind,
};

/// Seeded MAML meta-parameters for a `dim → hidden → ways` tanh network.
pub fn meta_params(dim: usize, hidden: usize, ways: usize) -> MetaParams {
    let spec = MlpSpec::new(vec![dim, hidden, ways], Activation::Tanh).expect("valid widths");
    MetaParams::initialize(spec, Learner::Maml { inner_lr: 0.5 }, 1).expect("consistent")
}

pub fn tasks(dim: usize, ways: usize, count: usize) -> Vec<Task> {
    let spec = TaskDistributionSpec {
        kind: TaskKind::Clustered {
            dim,
            n_ways: ways,
            k_support: 5,
            k_query: 10,
            class_center_scale: 1.0,
            within_class_noise: 0.5,
        },
        seed: 7,
    };
    sample_taskset(&spec, count).expect("valid spec")
}

/// Symmetric `n × n` matrix with a deterministic mixed-sign spectrum.
pub fn symmetric(n: usize) -> SymMatrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let x = ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5;
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    SymMatrix::from_matrix(m).expect("square")
}
