mod common;

use common::{tanh_params, tasks};
use metainfluence::hessian::{
    accumulate_gn, exact_meta_hessian, exact_meta_hessian_with_asymmetry, gn_columns_for_task,
    gn_dense, invert,
};
use metainfluence::linalg::{eigh_symmetric, Matrix};
use metainfluence::model::softmax;
use metainfluence::{
    Activation, Batch, Error, HessianVariant, Keep, Learner, MetaParams, MlpSpec, Provenance, Task,
};

/// Softmax regression Hessian `(1/M)Σ_t (1/n)Σ_n Jₙᵀ(diag σ − σσᵀ)Jₙ` for a
/// single linear layer, with `Jₙ` written out from the parameter layout.
fn linear_hessian(mp: &MetaParams, tasks: &[Task]) -> Matrix {
    let spec = mp.model.spec();
    let (d, c) = (spec.input_dim(), spec.output_dim());
    let q = mp.q();
    let mut h = Matrix::zeros(q, q);
    for t in tasks {
        let n = t.query.len();
        for s in 0..n {
            let x = t.query.inputs.row(s);
            let logits: Vec<f64> = (0..c)
                .map(|k| {
                    (0..d).map(|i| mp.omega[k * d + i] * x[i]).sum::<f64>() + mp.omega[c * d + k]
                })
                .collect();
            let sigma = softmax(&logits);
            let mut jac = Matrix::zeros(c, q);
            for k in 0..c {
                for i in 0..d {
                    jac[(k, k * d + i)] = x[i];
                }
                jac[(k, c * d + k)] = 1.0;
            }
            let w = 1.0 / (n * tasks.len()) as f64;
            for k in 0..c {
                for l in 0..c {
                    let a = if k == l { sigma[k] } else { 0.0 } - sigma[k] * sigma[l];
                    for i in 0..q {
                        for j in 0..q {
                            h[(i, j)] += w * a * jac[(k, i)] * jac[(l, j)];
                        }
                    }
                }
            }
        }
    }
    h
}

#[test]
fn exact_matches_analytic_softmax_regression() {
    let mp = tanh_params(vec![4, 3], Learner::Maml { inner_lr: 0.0 }, 3);
    let ts = tasks(4, 3, 2, 8);
    let (h, asym) = exact_meta_hessian_with_asymmetry(&mp, &ts, 2000).unwrap();
    assert!(asym < 1e-5);
    let oracle = linear_hessian(&mp, &ts);
    let err = h.to_dense().matrix().sub(&oracle).max_abs();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn linear_gauss_newton_is_the_full_hessian() {
    // with one linear layer the residual term vanishes
    let mp = tanh_params(vec![4, 3], Learner::Maml { inner_lr: 0.0 }, 4);
    let ts = tasks(4, 3, 3, 9);
    let gn = gn_dense(&mp, &ts).unwrap().to_dense();
    let oracle = linear_hessian(&mp, &ts);
    assert!(gn.matrix().sub(&oracle).max_abs() < 1e-12);
}

#[test]
fn duplicating_the_taskset_leaves_the_hessian_unchanged() {
    let mp = tanh_params(vec![3, 4, 3], Learner::Maml { inner_lr: 0.3 }, 5);
    let ts = tasks(3, 3, 3, 10);
    let twice: Vec<Task> = ts.iter().chain(ts.iter()).cloned().collect();
    let a = exact_meta_hessian(&mp, &ts, 2000).unwrap().to_dense();
    let b = exact_meta_hessian(&mp, &twice, 2000).unwrap().to_dense();
    assert!(a.matrix().sub(b.matrix()).max_abs() < 1e-10);
    let ga = gn_dense(&mp, &ts).unwrap().to_dense();
    let gb = gn_dense(&mp, &twice).unwrap().to_dense();
    assert!(ga.matrix().sub(gb.matrix()).max_abs() < 1e-12);
}

#[test]
fn dense_cap_is_enforced() {
    let mp = tanh_params(vec![3, 4, 3], Learner::Maml { inner_lr: 0.3 }, 5);
    let ts = tasks(3, 3, 1, 10);
    assert!(matches!(
        exact_meta_hessian(&mp, &ts, 10),
        Err(Error::DenseCapExceeded { .. })
    ));
}

#[test]
fn non_finite_gradient_names_the_task() {
    let mp = tanh_params(vec![3, 4, 3], Learner::Maml { inner_lr: 0.3 }, 5);
    let mut ts = tasks(3, 3, 2, 10);
    ts[1].query.inputs[(0, 0)] = f64::NAN;
    match exact_meta_hessian(&mp, &ts, 2000) {
        Err(Error::NonFiniteHessian { task, .. }) => assert_eq!(task, ts[1].id),
        other => panic!("{other:?}"),
    }
}

#[test]
fn factored_columns_reproduce_dense_gauss_newton() {
    for (seed, learner) in [(1, Learner::Maml { inner_lr: 0.4 }), (2, Learner::ProtoNet)] {
        let mp = tanh_params(vec![4, 6, 3], learner, seed);
        let ts = tasks(4, 3, 4, 20 + seed);
        let dense = gn_dense(&mp, &ts).unwrap().to_dense();
        let mut sum = Matrix::zeros(mp.q(), mp.q());
        for t in &ts {
            let outer = gn_columns_for_task(&mp, t, ts.len()).unwrap().outer_sum();
            for i in 0..mp.q() {
                for j in 0..mp.q() {
                    sum[(i, j)] += outer.get(i, j);
                }
            }
        }
        let scale = dense.matrix().max_abs();
        assert!(sum.sub(dense.matrix()).max_abs() < 1e-8 * scale.max(1.0));
        let acc = accumulate_gn(&mp, &ts, 10_000).unwrap().to_dense();
        assert!(acc.matrix().sub(dense.matrix()).max_abs() < 1e-8 * scale.max(1.0));
    }
}

#[test]
fn dense_gauss_newton_is_positive_semidefinite() {
    for seed in 0..5 {
        let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.5 }, seed);
        let ts = tasks(3, 3, 3, 40 + seed);
        let HessianVariant::Dense(m) = gn_dense(&mp, &ts).unwrap().variant else {
            unreachable!()
        };
        let e = eigh_symmetric(&m).unwrap();
        let max = e.values[0];
        assert!(*e.values.last().unwrap() >= -1e-9 * max, "seed {seed}");
    }
}

fn single_sample_task(x: Vec<f64>, label: usize, classes: usize) -> Task {
    let dim = x.len();
    let support_x: Vec<Vec<f64>> = (0..classes).map(|k| vec![k as f64; dim]).collect();
    Task {
        id: 0,
        group_id: None,
        provenance: Provenance::Regular,
        n_ways: classes,
        support: Batch::new(Matrix::from_rows(&support_x), (0..classes).collect()).unwrap(),
        query: Batch::new(Matrix::from_rows(&[x]), vec![label]).unwrap(),
    }
}

#[test]
fn saturated_prediction_contributes_no_columns() {
    let model =
        metainfluence::Mlp::new(MlpSpec::new(vec![1, 2], Activation::Tanh).unwrap()).unwrap();
    let mp = MetaParams::new(
        model,
        Learner::Maml { inner_lr: 0.0 },
        vec![800.0, -800.0, 0.0, 0.0],
    )
    .unwrap();
    let task = single_sample_task(vec![1.0], 0, 2);
    assert!(gn_columns_for_task(&mp, &task, 1).unwrap().is_empty());
}

#[test]
fn uniform_prediction_gives_at_most_c_minus_one_columns() {
    let model =
        metainfluence::Mlp::new(MlpSpec::new(vec![2, 4], Activation::Tanh).unwrap()).unwrap();
    let mp = MetaParams::new(model, Learner::Maml { inner_lr: 0.0 }, vec![0.0; 12]).unwrap();
    let task = single_sample_task(vec![0.3, -1.2], 2, 4);
    let cols = gn_columns_for_task(&mp, &task, 1).unwrap();
    assert!(cols.len() <= 3, "{}", cols.len());
    assert!(!cols.is_empty());
}

#[test]
fn factored_inverse_clamps_excess_keep() {
    let mp = tanh_params(vec![3, 4, 3], Learner::Maml { inner_lr: 0.3 }, 6);
    let ts = tasks(3, 3, 1, 11);
    let h = accumulate_gn(&mp, &ts, 4).unwrap();
    assert!(h.q() == mp.q());
    let inv = invert(&h, Keep::Count(100)).unwrap();
    assert_eq!(inv.retained, 4);
    assert_eq!(inv.warnings.len(), 1);
}
