//! Synthetic few-shot task generation.
//!
//! Clustered tasks draw `n_ways` Gaussian class centers per task and sample
//! support/query points around them. Noise tasks draw features independently
//! of the labels. Degradation attenuates a seeded subset of samples toward
//! zero, and augmentation applies random orthogonal rotations to the feature
//! space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::metalearn::{Provenance, Task};
use crate::model::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Clustered {
        dim: usize,
        n_ways: usize,
        k_support: usize,
        k_query: usize,
        class_center_scale: f64,
        within_class_noise: f64,
    },
    Noise {
        dim: usize,
        n_ways: usize,
        k_support: usize,
        k_query: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistributionSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub seed: u64,
}

impl TaskDistributionSpec {
    pub fn dim(&self) -> usize {
        match self.kind {
            TaskKind::Clustered { dim, .. } | TaskKind::Noise { dim, .. } => dim,
        }
    }

    pub fn n_ways(&self) -> usize {
        match self.kind {
            TaskKind::Clustered { n_ways, .. } | TaskKind::Noise { n_ways, .. } => n_ways,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dim, n_ways, ks, kq) = match self.kind {
            TaskKind::Clustered {
                dim,
                n_ways,
                k_support,
                k_query,
                ..
            }
            | TaskKind::Noise {
                dim,
                n_ways,
                k_support,
                k_query,
            } => (dim, n_ways, k_support, k_query),
        };
        if n_ways < 2 {
            return Err(Error::Invalid("n_ways must be at least 2".into()));
        }
        if dim == 0 || ks == 0 || kq == 0 {
            return Err(Error::Invalid(
                "dim and shot counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Xoshiro256PlusPlus) -> f64 {
    StandardNormal.sample(rng)
}

fn labelled_batch(
    rng: &mut Xoshiro256PlusPlus,
    dim: usize,
    n_ways: usize,
    shots: usize,
    mut sample: impl FnMut(&mut Xoshiro256PlusPlus, usize) -> Vec<f64>,
) -> Batch {
    let mut data = Vec::with_capacity(n_ways * shots * dim);
    let mut labels = Vec::with_capacity(n_ways * shots);
    for k in 0..n_ways {
        for _ in 0..shots {
            data.extend(sample(rng, k));
            labels.push(k);
        }
    }
    Batch {
        inputs: Matrix::from_vec(labels.len(), dim, data).expect("sizes agree"),
        labels,
    }
}

/// `count` tasks with ids `0..count`; a pure function of `(spec, count)`.
pub fn sample_taskset(spec: &TaskDistributionSpec, count: usize) -> Result<Vec<Task>> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut tasks = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let task = match spec.kind {
            TaskKind::Clustered {
                dim,
                n_ways,
                k_support,
                k_query,
                class_center_scale,
                within_class_noise,
            } => {
                let centers: Vec<Vec<f64>> = (0..n_ways)
                    .map(|_| {
                        (0..dim)
                            .map(|_| class_center_scale * gaussian(&mut rng))
                            .collect()
                    })
                    .collect();
                let mut draw = |rng: &mut Xoshiro256PlusPlus, k: usize| -> Vec<f64> {
                    centers[k]
                        .iter()
                        .map(|c| c + within_class_noise * gaussian(rng))
                        .collect()
                };
                let support = labelled_batch(&mut rng, dim, n_ways, k_support, &mut draw);
                let query = labelled_batch(&mut rng, dim, n_ways, k_query, &mut draw);
                Task {
                    id,
                    group_id: None,
                    provenance: Provenance::Regular,
                    n_ways,
                    support,
                    query,
                }
            }
            TaskKind::Noise {
                dim,
                n_ways,
                k_support,
                k_query,
            } => {
                let mut draw = |rng: &mut Xoshiro256PlusPlus, _k: usize| -> Vec<f64> {
                    (0..dim).map(|_| gaussian(rng)).collect()
                };
                let support = labelled_batch(&mut rng, dim, n_ways, k_support, &mut draw);
                let query = labelled_batch(&mut rng, dim, n_ways, k_query, &mut draw);
                Task {
                    id,
                    group_id: None,
                    provenance: Provenance::Noise,
                    n_ways,
                    support,
                    query,
                }
            }
        };
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Attenuation strength: degraded features are scaled by `1 − alpha`.
    pub alpha: f64,
    /// Fraction of samples degraded.
    pub ratio: f64,
}

impl DegradeParams {
    pub fn new(alpha: f64, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Invalid(format!(
                "degradation parameters must lie in [0, 1] (alpha {alpha}, ratio {ratio})"
            )));
        }
        Ok(Self { alpha, ratio })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DegradeScope {
    #[default]
    Both,
    Support,
    Query,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Attenuates a seeded subset of `round(ratio·n)` samples by `1 − alpha`.
///
/// The subset order depends only on `(task.id, seed)`, so for a fixed seed the
/// degraded sets are nested as `ratio` grows.
pub fn degrade_task(
    task: &Task,
    dp: DegradeParams,
    seed: u64,
    scope: DegradeScope,
) -> Result<Task> {
    let dp = DegradeParams::new(dp.alpha, dp.ratio)?;
    let mut out = task.clone();
    let ns = task.support.len();
    let mut slots: Vec<(bool, usize)> = Vec::new();
    if scope != DegradeScope::Query {
        slots.extend((0..ns).map(|i| (true, i)));
    }
    if scope != DegradeScope::Support {
        slots.extend((0..task.query.len()).map(|i| (false, i)));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(mix_seed(seed, task.id));
    slots.shuffle(&mut rng);
    let n_degraded = (dp.ratio * slots.len() as f64).round() as usize;
    let factor = 1.0 - dp.alpha;
    for &(in_support, i) in &slots[..n_degraded] {
        let batch = if in_support {
            &mut out.support
        } else {
            &mut out.query
        };
        batch
            .inputs
            .row_mut(i)
            .iter_mut()
            .for_each(|x| *x *= factor);
    }
    Ok(out)
}

/// Orthogonal matrix from modified Gram-Schmidt on the columns of
/// `I + scale·G` with Gaussian `G`; the identity when `scale` is zero.
fn random_rotation(dim: usize, scale: f64, rng: &mut Xoshiro256PlusPlus) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..dim)
        .map(|j| {
            (0..dim)
                .map(|i| {
                    let g = gaussian(rng);
                    if i == j {
                        1.0 + scale * g
                    } else {
                        scale * g
                    }
                })
                .collect()
        })
        .collect();
    for j in 0..dim {
        for i in 0..j {
            let c = dot(&cols[i], &cols[j]);
            let (done, rest) = cols.split_at_mut(j);
            axpy(-c, &done[i], &mut rest[0]);
        }
        let n = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|x| *x /= n);
    }
    let mut m = Matrix::zeros(dim, dim);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

fn rotate_batch(b: &Batch, rot: &Matrix) -> Batch {
    // rows are samples: X' = X Rᵀ
    Batch {
        inputs: b.inputs.matmul(&rot.transpose()),
        labels: b.labels.clone(),
    }
}

/// `count` rotated variants of `task` with ids `first_id..`, all sharing the
/// source's group id (or its task id when it has none).
pub fn augment_group(
    task: &Task,
    count: usize,
    transform_scale: f64,
    seed: u64,
    first_id: u64,
) -> Vec<Task> {
    let group = task.group_id.unwrap_or(task.id);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(mix_seed(seed, task.id));
    (0..count as u64)
        .map(|v| {
            let rot = random_rotation(task.dim(), transform_scale, &mut rng);
            Task {
                id: first_id + v,
                group_id: Some(group),
                provenance: task.provenance,
                n_ways: task.n_ways,
                support: rotate_batch(&task.support, &rot),
                query: rotate_batch(&task.query, &rot),
            }
        })
        .collect()
}

/// Concatenates regular and noise tasks, renumbers them `0..` in that order
/// (regular first), records provenance and shuffles by `seed`.
pub fn mix_tasksets(regular: &[Task], noise: &[Task], seed: u64) -> Vec<Task> {
    let mut out: Vec<Task> = Vec::with_capacity(regular.len() + noise.len());
    for (t, prov) in regular
        .iter()
        .map(|t| (t, Provenance::Regular))
        .chain(noise.iter().map(|t| (t, Provenance::Noise)))
    {
        let mut t = t.clone();
        t.id = out.len() as u64;
        t.provenance = prov;
        out.push(t);
    }
    if !noise.is_empty() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        out.shuffle(&mut rng);
    }
    out
}
