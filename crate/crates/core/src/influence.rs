//! Task-level influence: on the meta-parameters, on the adapted weights of a
//! test task, and on that test task's loss.
//!
//! Upweighting the loss of training task `j` by `ε` shifts the trained
//! meta-parameters by `ε·I^meta(j)` to first order, with
//! `I^meta(j) = −H⁺∇_ω ℒʲ(ω̂)`. The adapted weights of a test task move by
//! `(∂𝒜/∂ω)·I^meta` and its loss by `∇_θ L_test(θ̂)ᵀ(∂𝒜/∂ω)·I^meta`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::SpectralInverse;
use crate::linalg::{axpy, dot, Matrix};
use crate::metalearn::{meta_train_weighted, MetaParams, Task, TrainConfig, Upweight};

/// Stored `I^meta` of one training task (or of a group of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub task_id: u64,
    pub group_id: Option<u64>,
    pub i_meta: Vec<f64>,
}

/// `−H⁺·∇_ω ℒ(train_task)`
pub fn influence_meta(
    inv: &SpectralInverse,
    mp: &MetaParams,
    train_task: &Task,
) -> Result<InfluenceRecord> {
    if inv.q() != mp.q() {
        return Err(Error::DimensionMismatch {
            expected: mp.q(),
            got: inv.q(),
        });
    }
    let g = mp.meta_grad(train_task)?;
    let mut i_meta = inv.apply(&g);
    i_meta.iter_mut().for_each(|x| *x = -*x);
    Ok(InfluenceRecord {
        task_id: train_task.id,
        group_id: train_task.group_id,
        i_meta,
    })
}

/// [`influence_meta`] for every task, in taskset order.
pub fn influence_meta_all(
    inv: &SpectralInverse,
    mp: &MetaParams,
    tasks: &[Task],
) -> Result<Vec<InfluenceRecord>> {
    tasks
        .par_iter()
        .map(|t| influence_meta(inv, mp, t))
        .collect()
}

/// Sum of member records, accumulated in the order given.
pub fn influence_group(members: &[&InfluenceRecord], group_id: u64) -> Result<InfluenceRecord> {
    let first = members
        .first()
        .ok_or_else(|| Error::Invalid(format!("group {group_id} has no members")))?;
    let q = first.i_meta.len();
    let mut acc = vec![0.0; q];
    for r in members {
        if r.i_meta.len() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: r.i_meta.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(&r.i_meta) {
            *a += x;
        }
    }
    Ok(InfluenceRecord {
        task_id: group_id,
        group_id: Some(group_id),
        i_meta: acc,
    })
}

/// Groups records by `group_id` (ungrouped records form singleton groups
/// keyed by their task id) and sums each group in record order.
pub fn group_records(records: &[InfluenceRecord]) -> Result<Vec<InfluenceRecord>> {
    let mut groups: BTreeMap<u64, Vec<&InfluenceRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.group_id.unwrap_or(r.task_id))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|(g, m)| influence_group(&m, g))
        .collect()
}

/// `(∂𝒜/∂ω)·I^meta` for the test task's adaptation.
pub fn influence_adapt(
    mp: &MetaParams,
    test_task: &Task,
    rec: &InfluenceRecord,
) -> Result<Vec<f64>> {
    if rec.i_meta.len() != mp.q() {
        return Err(Error::DimensionMismatch {
            expected: mp.q(),
            got: rec.i_meta.len(),
        });
    }
    mp.adapt_jvp(test_task, &rec.i_meta)
}

/// `∇_θ L_test(θ̂)ᵀ·I^adpt`
pub fn influence_perf(mp: &MetaParams, test_task: &Task, rec: &InfluenceRecord) -> Result<f64> {
    let adapted = influence_adapt(mp, test_task, rec)?;
    Ok(dot(&mp.adapted_loss_grad(test_task)?, &adapted))
}

/// How raw `I^perf` values are turned into scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `score = −I^perf`: positive scores lower the test loss when upweighted.
    #[default]
    HelpfulPositive,
    /// `score = I^perf`
    Raw,
}

impl SignConvention {
    pub fn factor(self) -> f64 {
        match self {
            SignConvention::HelpfulPositive => -1.0,
            SignConvention::Raw => 1.0,
        }
    }
}

/// Scores of every (test, train) pair; row `i` belongs to `test_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub test_ids: Vec<u64>,
    pub train_ids: Vec<u64>,
    pub scores: Matrix,
    pub sign: SignConvention,
}

impl ScoreTable {
    /// Train column indices of test row `i`, by descending score then
    /// ascending train id.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        let row = self.scores.row(i);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
            Ordering::Equal => self.train_ids[a].cmp(&self.train_ids[b]),
            o => o,
        });
        idx
    }

    /// `ranks[i][j]` is the rank (0 = top) of train column `j` in test row `i`.
    pub fn ranks(&self) -> Vec<Vec<usize>> {
        (0..self.test_ids.len())
            .map(|i| {
                let mut r = vec![0; self.train_ids.len()];
                for (pos, j) in self.ranking(i).into_iter().enumerate() {
                    r[j] = pos;
                }
                r
            })
            .collect()
    }

    pub fn rank_of(&self, test_row: usize, train_col: usize) -> usize {
        self.ranking(test_row)
            .iter()
            .position(|&j| j == train_col)
            .expect("column in range")
    }
}

/// Scores from stored records. Uses `⟨∇_θL_test, (∂𝒜/∂ω)I⟩ = ⟨∇_ωℒ_test, I⟩`,
/// valid because the adaptation Jacobian is symmetric for both learners.
pub fn score_table_from_records(
    mp: &MetaParams,
    records: &[InfluenceRecord],
    test_tasks: &[Task],
    sign: SignConvention,
) -> Result<ScoreTable> {
    let test_grads: Vec<Vec<f64>> = test_tasks
        .par_iter()
        .map(|t| mp.meta_grad(t))
        .collect::<Result<_>>()?;
    let mut scores = Matrix::zeros(test_tasks.len(), records.len());
    let s = sign.factor();
    scores
        .as_mut_slice()
        .par_chunks_mut(records.len().max(1))
        .zip(test_grads.par_iter())
        .for_each(|(row, g)| {
            for (x, r) in row.iter_mut().zip(records) {
                *x = s * dot(g, &r.i_meta);
            }
        });
    Ok(ScoreTable {
        test_ids: test_tasks.iter().map(|t| t.id).collect(),
        train_ids: records.iter().map(|r| r.task_id).collect(),
        scores,
        sign,
    })
}

pub fn score_table(
    mp: &MetaParams,
    inv: &SpectralInverse,
    train_tasks: &[Task],
    test_tasks: &[Task],
    sign: SignConvention,
) -> Result<ScoreTable> {
    let records = influence_meta_all(inv, mp, train_tasks)?;
    score_table_from_records(mp, &records, test_tasks, sign)
}

/// `(ω̂_ε − ω̂)/ε` where `ω̂_ε` is retrained with task `j` upweighted by `ε`
/// under the same seed and schedule.
pub fn loo_retrain_oracle(
    mp0: &MetaParams,
    tasks: &[Task],
    config: &TrainConfig,
    j: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let (base, _) = meta_train_weighted(mp0, tasks, config, None)?;
    loo_retrain_oracle_from(mp0, &base, tasks, config, j, epsilon)
}

/// As [`loo_retrain_oracle`] with the unperturbed result supplied.
pub fn loo_retrain_oracle_from(
    mp0: &MetaParams,
    base: &MetaParams,
    tasks: &[Task],
    config: &TrainConfig,
    j: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if j >= tasks.len() {
        return Err(Error::Invalid(format!("task index {j} out of range")));
    }
    if epsilon == 0.0 {
        return Err(Error::Invalid("epsilon must be non-zero".into()));
    }
    let up = Upweight {
        task_index: j,
        epsilon,
    };
    let (pert, _) = meta_train_weighted(mp0, tasks, config, Some(up))?;
    let mut d = pert.omega;
    axpy(-1.0, &base.omega, &mut d);
    d.iter_mut().for_each(|x| *x /= epsilon);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[Vec<f64>], train_ids: Vec<u64>) -> ScoreTable {
        ScoreTable {
            test_ids: (0..rows.len() as u64).collect(),
            train_ids,
            scores: Matrix::from_rows(rows),
            sign: SignConvention::HelpfulPositive,
        }
    }

    #[test]
    fn ranking_breaks_ties_by_train_id() {
        let t = table(&[vec![1.0, 2.0, 2.0, -1.0]], vec![9, 7, 3, 1]);
        assert_eq!(t.ranking(0), vec![2, 1, 0, 3]);
        assert_eq!(t.ranks()[0], vec![2, 1, 0, 3]);
        assert_eq!(t.rank_of(0, 3), 3);
    }

    #[test]
    fn single_train_task_ranks_first() {
        let t = table(&[vec![-5.0], vec![3.0]], vec![4]);
        assert_eq!(t.rank_of(0, 0), 0);
        assert_eq!(t.rank_of(1, 0), 0);
    }

    #[test]
    fn group_of_one_is_the_member() {
        let r = InfluenceRecord {
            task_id: 3,
            group_id: None,
            i_meta: vec![0.1, -0.2, 0.3],
        };
        let g = influence_group(&[&r], 3).unwrap();
        assert_eq!(g.i_meta, r.i_meta);
        assert!(influence_group(&[], 0).is_err());
    }

    #[test]
    fn grouping_partitions_records() {
        let recs: Vec<InfluenceRecord> = (0..6)
            .map(|i| InfluenceRecord {
                task_id: i,
                group_id: Some(i % 2),
                i_meta: vec![i as f64, 1.0],
            })
            .collect();
        let groups = group_records(&recs).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].i_meta, vec![0.0 + 2.0 + 4.0, 3.0]);
        assert_eq!(groups[1].i_meta, vec![1.0 + 3.0 + 5.0, 3.0]);
    }

    #[test]
    fn sign_factor() {
        assert_eq!(SignConvention::default().factor(), -1.0);
        assert_eq!(SignConvention::Raw.factor(), 1.0);
    }
}
