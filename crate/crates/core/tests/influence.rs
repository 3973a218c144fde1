mod common;

use common::{max_abs_diff, tanh_params, tasks};
use metainfluence::experiments::cosine;
use metainfluence::hessian::{exact_meta_hessian, invert};
use metainfluence::influence::{
    influence_adapt, influence_group, influence_meta, influence_meta_all, influence_perf,
    loo_retrain_oracle, score_table, score_table_from_records,
};
use metainfluence::linalg::{axpy, dot, norm};
use metainfluence::metalearn::meta_train;
use metainfluence::taskgen::sample_taskset;
use metainfluence::{
    Activation, Keep, Learner, MetaParams, MlpSpec, Optimizer, SignConvention, SpectralInverse,
    TaskDistributionSpec, TaskKind, TrainConfig,
};

#[test]
fn identity_inverse_gives_negative_meta_gradient() {
    let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.2 }, 1);
    let t = tasks(3, 3, 1, 2).remove(0);
    let rec = influence_meta(&SpectralInverse::identity(mp.q()), &mp, &t).unwrap();
    let g = mp.meta_grad(&t).unwrap();
    assert!(rec.i_meta.iter().zip(&g).all(|(a, b)| *a == -*b));
    assert_eq!(rec.task_id, t.id);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.2 }, 1);
    let t = tasks(3, 3, 1, 2).remove(0);
    assert!(influence_meta(&SpectralInverse::identity(mp.q() + 1), &mp, &t).is_err());
}

#[test]
fn influence_lies_in_the_retained_subspace() {
    let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.3 }, 3);
    let ts = tasks(3, 3, 4, 4);
    let h = exact_meta_hessian(&mp, &ts, 2000).unwrap();
    let inv = invert(&h, Keep::Threshold(1e-6)).unwrap();
    assert!(inv.retained < mp.q());
    for rec in influence_meta_all(&inv, &mp, &ts).unwrap() {
        let p = inv.projector.matvec(&rec.i_meta);
        let mut resid = rec.i_meta.clone();
        axpy(-1.0, &p, &mut resid);
        assert!(norm(&resid) <= 1e-6 * norm(&rec.i_meta));
    }
}

#[test]
fn group_is_the_ordered_sum_and_doubles_under_repetition() {
    let mp = tanh_params(vec![3, 4, 3], Learner::Maml { inner_lr: 0.3 }, 5);
    let ts = tasks(3, 3, 3, 6);
    let recs = influence_meta_all(&SpectralInverse::identity(mp.q()), &mp, &ts).unwrap();
    let g = influence_group(&[&recs[0], &recs[1], &recs[2]], 9).unwrap();
    let mut expect = vec![0.0; mp.q()];
    for r in &recs {
        for (e, x) in expect.iter_mut().zip(&r.i_meta) {
            *e += x;
        }
    }
    assert_eq!(g.i_meta, expect);
    assert_eq!(g.group_id, Some(9));
    let twice = influence_group(&[&recs[1], &recs[1]], 1).unwrap();
    assert!(twice
        .i_meta
        .iter()
        .zip(&recs[1].i_meta)
        .all(|(a, b)| *a == 2.0 * b));
    assert!(influence_group(&[], 0).is_err());
}

#[test]
fn adapted_influence_matches_the_jacobian() {
    let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.4 }, 7);
    let ts = tasks(3, 3, 2, 8);
    let rec = influence_meta(&SpectralInverse::identity(mp.q()), &mp, &ts[0]).unwrap();
    let jac = mp.adapt(&ts[1], true).unwrap().jacobian.unwrap();
    let via_jacobian = jac.matvec(&rec.i_meta);
    let via_jvp = influence_adapt(&mp, &ts[1], &rec).unwrap();
    assert!(max_abs_diff(&via_jvp, &via_jacobian) < 1e-12);
}

#[test]
fn adapted_influence_is_identity_without_inner_step() {
    for learner in [Learner::ProtoNet, Learner::Maml { inner_lr: 0.0 }] {
        let mp = tanh_params(vec![3, 5, 3], learner, 9);
        let ts = tasks(3, 3, 2, 10);
        let rec = influence_meta(&SpectralInverse::identity(mp.q()), &mp, &ts[0]).unwrap();
        assert_eq!(influence_adapt(&mp, &ts[1], &rec).unwrap(), rec.i_meta);
    }
}

#[test]
fn score_table_agrees_with_performance_influence() {
    for learner in [Learner::ProtoNet, Learner::Maml { inner_lr: 0.4 }] {
        let mp = tanh_params(vec![3, 5, 3], learner, 11);
        let train = tasks(3, 3, 4, 12);
        let test = tasks(3, 3, 3, 13);
        let inv = SpectralInverse::identity(mp.q());
        let recs = influence_meta_all(&inv, &mp, &train).unwrap();
        let table = score_table(&mp, &inv, &train, &test, SignConvention::HelpfulPositive).unwrap();
        let raw = score_table_from_records(&mp, &recs, &test, SignConvention::Raw).unwrap();
        for (i, t) in test.iter().enumerate() {
            for (j, r) in recs.iter().enumerate() {
                let perf = influence_perf(&mp, t, r).unwrap();
                let scale = perf.abs().max(1e-12);
                assert!((raw.scores[(i, j)] - perf).abs() < 1e-9 * scale.max(1.0));
                assert_eq!(table.scores[(i, j)], -raw.scores[(i, j)]);
            }
        }
        assert_eq!(
            table.train_ids,
            train.iter().map(|t| t.id).collect::<Vec<_>>()
        );
        assert_eq!(
            table.test_ids,
            test.iter().map(|t| t.id).collect::<Vec<_>>()
        );
    }
}

#[test]
fn performance_influence_is_the_directional_derivative_of_test_loss() {
    let mp = tanh_params(vec![3, 5, 3], Learner::Maml { inner_lr: 0.4 }, 14);
    let ts = tasks(3, 3, 2, 15);
    let rec = influence_meta(&SpectralInverse::identity(mp.q()), &mp, &ts[0]).unwrap();
    let h = 1e-5;
    let shifted = |s: f64| {
        let mut w = mp.omega.clone();
        axpy(s, &rec.i_meta, &mut w);
        mp.with_omega(w).meta_loss(&ts[1]).unwrap()
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    let perf = influence_perf(&mp, &ts[1], &rec).unwrap();
    assert!((fd - perf).abs() < 1e-6 * perf.abs().max(1.0));
}

/// Softmax regression trained to convergence: upweighting a task moves the
/// optimum along `i_meta` with an `O(ε)` error.
#[test]
fn retraining_oracle_is_first_order_in_epsilon() {
    let spec = TaskDistributionSpec {
        kind: TaskKind::Clustered {
            dim: 4,
            n_ways: 3,
            k_support: 4,
            k_query: 6,
            class_center_scale: 1.0,
            within_class_noise: 0.8,
        },
        seed: 51,
    };
    let ts = sample_taskset(&spec, 4).unwrap();
    let model =
        metainfluence::Mlp::new(MlpSpec::new(vec![4, 3], Activation::Tanh).unwrap()).unwrap();
    let mp0 = MetaParams::new(model, Learner::Maml { inner_lr: 0.0 }, vec![0.0; 15]).unwrap();
    let cfg = TrainConfig {
        steps: 3000,
        full_batch: true,
        optimizer: Optimizer::Sgd { lr: 0.5 },
        ..Default::default()
    };
    let (mp, _) = meta_train(&mp0, &ts, &cfg).unwrap();
    let inv = invert(
        &exact_meta_hessian(&mp, &ts, 2000).unwrap(),
        Keep::Threshold(1e-8),
    )
    .unwrap();
    let rec = influence_meta(&inv, &mp, &ts[1]).unwrap();
    let mut errs = Vec::new();
    for eps in [1e-2, 1e-3] {
        let d = loo_retrain_oracle(&mp0, &ts, &cfg, 1, eps).unwrap();
        assert!(cosine(&d, &rec.i_meta).unwrap() > 0.99);
        let mut diff = d.clone();
        axpy(-1.0, &rec.i_meta, &mut diff);
        errs.push(norm(&diff));
    }
    let ratio = errs[0] / errs[1];
    assert!((5.0..=15.0).contains(&ratio), "error ratio {ratio}");
    assert!(dot(&rec.i_meta, &rec.i_meta) > 0.0);
}
