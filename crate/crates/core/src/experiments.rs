//! Experiment protocols built on top of influence score tables, and the
//! small statistics they need.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::hessian::{
    accumulate_gn, exact_meta_hessian, invert, invert_eigen, HessianVariant, SpectralInverse,
};
use crate::influence::{
    influence_meta_all, score_table_from_records, InfluenceRecord, SignConvention,
};
use crate::linalg::{dot, eigh_symmetric, Keep, Matrix};
use crate::metalearn::{MetaParams, Provenance, Task};
use crate::taskgen::{degrade_task, DegradeParams, DegradeScope};

pub const SCHEMA_VERSION: u32 = 1;

/// Envelope shared by every report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub config_echo: serde_json::Value,
    pub results: T,
}

impl<T> Report<T> {
    pub fn new(config_echo: serde_json::Value, results: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_echo,
            results,
        }
    }
}

/// Pearson correlation; `None` when either sequence has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let d = (dot(a, a) * dot(b, b)).sqrt();
    (d > 0.0).then(|| dot(a, b) / d)
}

/// Exact two-sided binomial test at `p = 1/2`: the total probability of
/// outcomes no more likely than the observed one.
pub fn binomial_two_sided_p(successes: u64, trials: u64) -> f64 {
    assert!(successes <= trials, "successes exceed trials");
    let n = trials;
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    let log_pmf = |k: u64| ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k) + ln_half;
    let observed = log_pmf(successes);
    let mut p = 0.0;
    for k in 0..=n {
        let l = log_pmf(k);
        // relative slack absorbs rounding in the log-factorials
        if l <= observed + 1e-7 {
            p += l.exp();
        }
    }
    p.min(1.0)
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd {
        mean,
        std,
        n: xs.len(),
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Records must pair up with the training tasks, in order.
fn check_records(records: &[InfluenceRecord], train: &[Task]) -> Result<()> {
    if records.len() != train.len() || records.iter().zip(train).any(|(r, t)| r.task_id != t.id) {
        return Err(Error::Invalid(
            "influence records do not match the training taskset".into(),
        ));
    }
    Ok(())
}

/// Rank of column `j` in a score row: descending score, ties by train id.
fn rank_in_row(row: &[f64], train_ids: &[u64], j: usize) -> usize {
    row.iter()
        .enumerate()
        .filter(|&(k, &s)| match s.total_cmp(&row[j]) {
            Ordering::Greater => true,
            Ordering::Equal => train_ids[k] < train_ids[j],
            Ordering::Less => false,
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfRankSummary {
    pub mean: f64,
    pub std: f64,
    pub fraction_rank0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfRankReport {
    pub sign_convention: SignConvention,
    pub test_ids: Vec<u64>,
    pub self_rank: Vec<usize>,
    pub self_score: Vec<f64>,
    pub summary: SelfRankSummary,
}

/// Uses every training task as a test task and ranks it among all training
/// tasks by its score.
pub fn run_self_rank(
    mp: &MetaParams,
    inv: &SpectralInverse,
    train: &[Task],
) -> Result<SelfRankReport> {
    self_rank_from_records(mp, &influence_meta_all(inv, mp, train)?, train)
}

/// [`run_self_rank`] from stored records, one per training task in order.
pub fn self_rank_from_records(
    mp: &MetaParams,
    records: &[InfluenceRecord],
    train: &[Task],
) -> Result<SelfRankReport> {
    if train.is_empty() {
        return Err(Error::Invalid(
            "self-rank needs at least one training task".into(),
        ));
    }
    check_records(records, train)?;
    let table = score_table_from_records(mp, records, train, SignConvention::HelpfulPositive)?;
    let self_rank: Vec<usize> = (0..train.len())
        .map(|i| rank_in_row(table.scores.row(i), &table.train_ids, i))
        .collect();
    let self_score: Vec<f64> = (0..train.len()).map(|i| table.scores[(i, i)]).collect();
    let ranks: Vec<f64> = self_rank.iter().map(|&r| r as f64).collect();
    let ms = mean_std(&ranks).expect("non-empty");
    Ok(SelfRankReport {
        sign_convention: table.sign,
        test_ids: table.test_ids,
        summary: SelfRankSummary {
            mean: ms.mean,
            std: ms.std,
            fraction_rank0: self_rank.iter().filter(|&&r| r == 0).count() as f64
                / self_rank.len() as f64,
        },
        self_rank,
        self_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub alphas: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Ratio held fixed while alpha is swept.
    pub fixed_ratio: f64,
    /// Alpha held fixed while ratio is swept.
    pub fixed_alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub scope: DegradeScope,
}

/// Per-task correlation summary; `excluded` counts tasks whose correlation
/// is undefined because the rank or score never changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub mean_abs: Option<f64>,
    pub included: usize,
    pub excluded: usize,
}

fn summarize(values: &[Option<f64>]) -> CorrelationSummary {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let abs: Vec<f64> = defined.iter().map(|x| x.abs()).collect();
    let ms = mean_std(&defined);
    CorrelationSummary {
        mean: ms.map(|m| m.mean),
        std: ms.map(|m| m.std),
        mean_abs: mean_std(&abs).map(|m| m.mean),
        included: defined.len(),
        excluded: values.len() - defined.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationTrace {
    pub task_id: u64,
    /// Self-rank and self-score along the alpha grid.
    pub alpha_ranks: Vec<usize>,
    pub alpha_scores: Vec<f64>,
    pub ratio_ranks: Vec<usize>,
    pub ratio_scores: Vec<f64>,
    pub corr_alpha_rank: Option<f64>,
    pub corr_alpha_score: Option<f64>,
    pub corr_ratio_rank: Option<f64>,
    pub corr_ratio_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub sign_convention: SignConvention,
    pub config: DegradationConfig,
    pub alpha_rank: CorrelationSummary,
    pub alpha_score: CorrelationSummary,
    pub ratio_rank: CorrelationSummary,
    pub ratio_score: CorrelationSummary,
    pub traces: Vec<DegradationTrace>,
}

fn self_rank_and_score(
    mp: &MetaParams,
    records: &[InfluenceRecord],
    train_ids: &[u64],
    own: usize,
    test: &Task,
) -> Result<(usize, f64)> {
    let g = mp.meta_grad(test)?;
    let s = SignConvention::HelpfulPositive.factor();
    let row: Vec<f64> = records.iter().map(|r| s * dot(&g, &r.i_meta)).collect();
    Ok((rank_in_row(&row, train_ids, own), row[own]))
}

/// Degrades each training task along an alpha sweep and a ratio sweep, then
/// correlates the degradation parameter with the task's self-rank and
/// self-score.
pub fn run_degradation(
    mp: &MetaParams,
    inv: &SpectralInverse,
    train: &[Task],
    config: &DegradationConfig,
) -> Result<DegradationReport> {
    degradation_from_records(mp, &influence_meta_all(inv, mp, train)?, train, config)
}

pub fn degradation_from_records(
    mp: &MetaParams,
    records: &[InfluenceRecord],
    train: &[Task],
    config: &DegradationConfig,
) -> Result<DegradationReport> {
    check_records(records, train)?;
    let train_ids: Vec<u64> = train.iter().map(|t| t.id).collect();
    let traces: Vec<DegradationTrace> = train
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let sweep = |points: Vec<DegradeParams>| -> Result<(Vec<usize>, Vec<f64>)> {
                let mut ranks = Vec::with_capacity(points.len());
                let mut scores = Vec::with_capacity(points.len());
                for dp in points {
                    let t = degrade_task(task, dp, config.seed, config.scope)?;
                    let (r, s) = self_rank_and_score(mp, records, &train_ids, i, &t)?;
                    ranks.push(r);
                    scores.push(s);
                }
                Ok((ranks, scores))
            };
            let alpha_points = config
                .alphas
                .iter()
                .map(|&a| DegradeParams::new(a, config.fixed_ratio))
                .collect::<Result<Vec<_>>>()?;
            let ratio_points = config
                .ratios
                .iter()
                .map(|&r| DegradeParams::new(config.fixed_alpha, r))
                .collect::<Result<Vec<_>>>()?;
            let (alpha_ranks, alpha_scores) = sweep(alpha_points)?;
            let (ratio_ranks, ratio_scores) = sweep(ratio_points)?;
            let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            Ok(DegradationTrace {
                task_id: task.id,
                corr_alpha_rank: pearson(&config.alphas, &as_f(&alpha_ranks)),
                corr_alpha_score: pearson(&config.alphas, &alpha_scores),
                corr_ratio_rank: pearson(&config.ratios, &as_f(&ratio_ranks)),
                corr_ratio_score: pearson(&config.ratios, &ratio_scores),
                alpha_ranks,
                alpha_scores,
                ratio_ranks,
                ratio_scores,
            })
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&DegradationTrace) -> Option<f64>| {
        summarize(&traces.iter().map(f).collect::<Vec<_>>())
    };
    Ok(DegradationReport {
        sign_convention: SignConvention::HelpfulPositive,
        config: config.clone(),
        alpha_rank: pick(|t| t.corr_alpha_rank),
        alpha_score: pick(|t| t.corr_alpha_score),
        ratio_rank: pick(|t| t.corr_ratio_rank),
        ratio_score: pick(|t| t.corr_ratio_score),
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProperOrderRow {
    pub test_id: u64,
    pub test_loss: f64,
    pub mean_regular: f64,
    pub mean_noise: f64,
    pub median_regular: f64,
    pub median_noise: f64,
    pub proper_order_mean: bool,
    pub proper_order_median: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProperOrderReport {
    pub sign_convention: SignConvention,
    pub binomial_test: String,
    /// Sorted by ascending test loss, then test id.
    pub rows: Vec<ProperOrderRow>,
    pub tests: usize,
    pub count_mean: usize,
    pub count_median: usize,
    pub p_value_mean: f64,
    pub p_value_median: f64,
}

/// Compares the scores of regular and noise training tasks on every test.
pub fn run_distribution_distinction(
    mp: &MetaParams,
    inv: &SpectralInverse,
    train: &[Task],
    tests: &[Task],
) -> Result<ProperOrderReport> {
    distribution_from_records(mp, &influence_meta_all(inv, mp, train)?, train, tests)
}

pub fn distribution_from_records(
    mp: &MetaParams,
    records: &[InfluenceRecord],
    train: &[Task],
    tests: &[Task],
) -> Result<ProperOrderReport> {
    check_records(records, train)?;
    let regular: Vec<usize> = (0..train.len())
        .filter(|&j| train[j].provenance == Provenance::Regular)
        .collect();
    let noise: Vec<usize> = (0..train.len())
        .filter(|&j| train[j].provenance == Provenance::Noise)
        .collect();
    if regular.is_empty() || noise.is_empty() {
        return Err(Error::Invalid(
            "proper order needs both regular and noise training tasks".into(),
        ));
    }
    if tests.is_empty() {
        return Err(Error::Invalid("no test tasks".into()));
    }
    let table = score_table_from_records(mp, records, tests, SignConvention::HelpfulPositive)?;
    let mut rows: Vec<ProperOrderRow> = tests
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let row = table.scores.row(i);
            let take = |idx: &[usize]| idx.iter().map(|&j| row[j]).collect::<Vec<f64>>();
            let (r, n) = (take(&regular), take(&noise));
            let mean_regular = r.iter().sum::<f64>() / r.len() as f64;
            let mean_noise = n.iter().sum::<f64>() / n.len() as f64;
            let (median_regular, median_noise) = (median(&r), median(&n));
            Ok(ProperOrderRow {
                test_id: t.id,
                test_loss: mp.meta_loss(t)?,
                mean_regular,
                mean_noise,
                median_regular,
                median_noise,
                proper_order_mean: mean_regular > mean_noise,
                proper_order_median: median_regular > median_noise,
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| {
        a.test_loss
            .total_cmp(&b.test_loss)
            .then(a.test_id.cmp(&b.test_id))
    });
    let count_mean = rows.iter().filter(|r| r.proper_order_mean).count();
    let count_median = rows.iter().filter(|r| r.proper_order_median).count();
    let n = rows.len() as u64;
    Ok(ProperOrderReport {
        sign_convention: SignConvention::HelpfulPositive,
        binomial_test: "exact two-sided, p = 0.5".into(),
        tests: rows.len(),
        count_mean,
        count_median,
        p_value_mean: binomial_two_sided_p(count_mean as u64, n),
        p_value_median: binomial_two_sided_p(count_median as u64, n),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactVsGnReport {
    /// Row index.
    pub keeps: Vec<usize>,
    /// Column index.
    pub capacities: Vec<usize>,
    /// Mean over tests of the Pearson correlation of the two score rows.
    pub mean: Vec<Vec<Option<f64>>>,
    pub std: Vec<Vec<Option<f64>>>,
    /// Per row, the column holding the largest mean correlation.
    pub row_argmax: Vec<Option<usize>>,
}

impl ExactVsGnReport {
    /// Fraction of rows whose maximum lies on or next to the diagonal
    /// (column index within one of the row index).
    pub fn diagonal_fraction(&self) -> f64 {
        let hits = self
            .row_argmax
            .iter()
            .enumerate()
            .filter(|(i, c)| c.is_some_and(|c| c.abs_diff(*i) <= 1))
            .count();
        hits as f64 / self.row_argmax.len().max(1) as f64
    }
}

fn row_correlations(a: &Matrix, b: &Matrix) -> (Option<f64>, Option<f64>) {
    let rs: Vec<Option<f64>> = (0..a.rows()).map(|i| pearson(a.row(i), b.row(i))).collect();
    let s = summarize(&rs);
    (s.mean, s.std)
}

/// Correlates scores from the exact Hessian (top-`k` eigenpairs) with scores
/// from the Gauss-Newton factor (buffer capacity `B`) over a grid of `k` and `B`.
/// Training tasks double as test tasks.
pub fn run_exact_vs_gn(
    mp: &MetaParams,
    train: &[Task],
    keeps: &[usize],
    capacities: &[usize],
    dense_cap: usize,
) -> Result<ExactVsGnReport> {
    let exact = exact_meta_hessian(mp, train, dense_cap)?;
    let HessianVariant::Dense(h) = &exact.variant else {
        unreachable!("exact Hessian is dense")
    };
    let e = eigh_symmetric(h)?;
    let sign = SignConvention::HelpfulPositive;
    let exact_tables = keeps
        .iter()
        .map(|&k| {
            let inv = invert_eigen(&e, Keep::Count(k))?;
            let recs = influence_meta_all(&inv, mp, train)?;
            Ok(score_table_from_records(mp, &recs, train, sign)?.scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let gn_tables = capacities
        .iter()
        .map(|&b| {
            let rep = accumulate_gn(mp, train, b)?;
            let inv = invert(&rep, Keep::Count(b))?;
            let recs = influence_meta_all(&inv, mp, train)?;
            Ok(score_table_from_records(mp, &recs, train, sign)?.scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Vec::with_capacity(keeps.len());
    let mut std = Vec::with_capacity(keeps.len());
    for ex in &exact_tables {
        let (m, s): (Vec<_>, Vec<_>) = gn_tables.iter().map(|gn| row_correlations(ex, gn)).unzip();
        mean.push(m);
        std.push(s);
    }
    let row_argmax = mean
        .iter()
        .map(|row: &Vec<Option<f64>>| {
            row.iter()
                .enumerate()
                .filter_map(|(j, v)| v.map(|v| (j, v)))
                .fold(None, |best: Option<(usize, f64)>, (j, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((j, v)),
                })
                .map(|(j, _)| j)
        })
        .collect();
    Ok(ExactVsGnReport {
        keeps: keeps.to_vec(),
        capacities: capacities.to_vec(),
        mean,
        std,
        row_argmax,
    })
}
