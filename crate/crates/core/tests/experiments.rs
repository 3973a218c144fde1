use metainfluence::experiments::{
    run_degradation, run_distribution_distinction, run_exact_vs_gn, run_self_rank, DegradationConfig,
};
use metainfluence::influence::{influence_meta_all, score_table};
use metainfluence::io::{load_influence, load_taskset, save_influence, save_score_csv, save_taskset};
use metainfluence::taskgen::{mix_tasksets, sample_taskset};
use metainfluence::{
    Activation, DegradeScope, Learner, MetaParams, MlpSpec, SignConvention, SpectralInverse, Task,
    TaskDistributionSpec, TaskKind,
};

fn spec(noise: bool, seed: u64) -> TaskDistributionSpec {
    let kind = if noise {
        TaskKind::Noise {
            dim: 3,
            n_ways: 3,
            k_support: 3,
            k_query: 4,
        }
    } else {
        TaskKind::Clustered {
            dim: 3,
            n_ways: 3,
            k_support: 3,
            k_query: 4,
            class_center_scale: 1.0,
            within_class_noise: 0.5,
        }
    };
    TaskDistributionSpec { kind, seed }
}

fn params() -> MetaParams {
    MetaParams::initialize(
        MlpSpec::new(vec![3, 4, 3], Activation::Tanh).unwrap(),
        Learner::Maml { inner_lr: 0.3 },
        2,
    )
    .unwrap()
}

fn mixed() -> Vec<Task> {
    let regular = sample_taskset(&spec(false, 1), 5).unwrap();
    let noise = sample_taskset(&spec(true, 2), 3).unwrap();
    mix_tasksets(&regular, &noise, 3)
}

#[test]
fn self_rank_of_a_lone_task_is_zero() {
    let mp = params();
    let train = sample_taskset(&spec(false, 1), 1).unwrap();
    let r = run_self_rank(&mp, &SpectralInverse::identity(mp.q()), &train).unwrap();
    assert_eq!(r.self_rank, vec![0]);
    assert_eq!(r.summary.fraction_rank0, 1.0);
}

#[test]
fn self_rank_reads_the_score_table() {
    let mp = params();
    let train = mixed();
    let inv = SpectralInverse::identity(mp.q());
    let r = run_self_rank(&mp, &inv, &train).unwrap();
    let table = score_table(&mp, &inv, &train, &train, SignConvention::HelpfulPositive).unwrap();
    for i in 0..train.len() {
        assert_eq!(r.self_rank[i], table.rank_of(i, i));
        assert_eq!(r.self_score[i], table.scores[(i, i)]);
    }
}

#[test]
fn degradation_sweeps_start_from_the_undegraded_score() {
    let mp = params();
    let train = mixed();
    let inv = SpectralInverse::identity(mp.q());
    let config = DegradationConfig {
        alphas: vec![0.0, 0.5, 1.0],
        ratios: vec![0.0, 0.5, 1.0],
        fixed_ratio: 1.0,
        fixed_alpha: 0.5,
        seed: 4,
        scope: DegradeScope::Both,
    };
    let d = run_degradation(&mp, &inv, &train, &config).unwrap();
    let s = run_self_rank(&mp, &inv, &train).unwrap();
    assert_eq!(d.traces.len(), train.len());
    for (i, t) in d.traces.iter().enumerate() {
        assert_eq!(t.alpha_scores[0], s.self_score[i]);
        assert_eq!(t.ratio_scores[0], s.self_score[i]);
        assert_eq!(t.alpha_ranks.len(), 3);
    }
    assert_eq!(d.alpha_score.included + d.alpha_score.excluded, train.len());
}

#[test]
fn distribution_counts_and_requires_both_provenances() {
    let mp = params();
    let train = mixed();
    let tests = sample_taskset(&spec(false, 9), 6).unwrap();
    let inv = SpectralInverse::identity(mp.q());
    let r = run_distribution_distinction(&mp, &inv, &train, &tests).unwrap();
    assert_eq!(r.tests, 6);
    assert_eq!(r.count_mean, r.rows.iter().filter(|x| x.proper_order_mean).count());
    assert!(r.rows.windows(2).all(|w| w[0].test_loss <= w[1].test_loss));
    for row in &r.rows {
        assert_eq!(row.proper_order_mean, row.mean_regular > row.mean_noise);
    }
    let regular_only = sample_taskset(&spec(false, 1), 4).unwrap();
    assert!(run_distribution_distinction(&mp, &inv, &regular_only, &tests).is_err());
}

#[test]
fn exact_vs_gn_grid_shape() {
    let mp = params();
    let train = sample_taskset(&spec(false, 1), 4).unwrap();
    let r = run_exact_vs_gn(&mp, &train, &[2, 4, 8], &[2, 4, 8], 2000).unwrap();
    assert_eq!(r.mean.len(), 3);
    assert!(r.mean.iter().all(|row| row.len() == 3));
    assert_eq!(r.row_argmax.len(), 3);
    for row in r.mean.iter().flatten().flatten() {
        assert!((-1.0..=1.0).contains(row));
    }
}

#[test]
fn artifacts_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mp = params();
    let train = mixed();
    let path = dir.path().join("tasks.json");
    save_taskset(&path, vec![spec(false, 1), spec(true, 2)], &train).unwrap();
    let (specs, back) = load_taskset(&path).unwrap();
    assert_eq!(back, train);
    assert_eq!(specs.len(), 2);

    let recs = influence_meta_all(&SpectralInverse::identity(mp.q()), &mp, &train).unwrap();
    let path = dir.path().join("influence.bin");
    save_influence(&path, &recs).unwrap();
    assert_eq!(load_influence(&path).unwrap(), recs);

    let table = score_table(&mp, &SpectralInverse::identity(mp.q()), &train, &train, SignConvention::HelpfulPositive)
        .unwrap();
    let path = dir.path().join("scores.csv");
    save_score_csv(&path, &table).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + train.len() * train.len());
    assert!(text.starts_with("test_id,train_id,score,rank"));
}
