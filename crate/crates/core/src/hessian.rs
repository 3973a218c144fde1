//! The meta-Hessian `H = (1/M) Σᵢ ∂²ℒⁱ/∂ω∂ω` and its pseudo-inverse.
//!
//! Three constructions are provided:
//!
//! * [`exact_meta_hessian`]: central differences of the exact meta-gradient,
//!   one column per coordinate. No third-order tensor is ever materialized.
//! * [`gn_dense`]: the Gauss-Newton term `Σ J_nᵀ(diag σ − σσᵀ)J_n`, assembled
//!   densely from full logit Jacobians.
//! * [`accumulate_gn`]: the same Gauss-Newton matrix as a factor `VVᵀ`, built
//!   task by task and compressed into a bounded buffer of orthogonal columns.
//!
//! Gauss-Newton columns are scaled by `1/√(n_query·M)` so every construction
//! estimates the same task-averaged matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, eigh_symmetric, factor_pseudo_inverse, orthogonalize_keep_largest, psd_sqrt_small,
    retained_indices, spectral_sum, EigenDecomposition, FactorMatrix, Keep, Matrix, SymMatrix,
};
use crate::metalearn::{MetaParams, Task};
use crate::model::softmax;

pub const DEFAULT_DENSE_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMethod {
    Exact,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HessianVariant {
    Dense(SymMatrix),
    Factored(FactorMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianRep {
    pub variant: HessianVariant,
    pub task_count: usize,
    pub method: HessianMethod,
    pub capacity: Option<usize>,
}

impl HessianRep {
    pub fn q(&self) -> usize {
        match &self.variant {
            HessianVariant::Dense(m) => m.dim(),
            HessianVariant::Factored(f) => f.rows(),
        }
    }

    /// Dense form; factored representations are expanded to `VVᵀ`.
    pub fn to_dense(&self) -> SymMatrix {
        match &self.variant {
            HessianVariant::Dense(m) => m.clone(),
            HessianVariant::Factored(f) => f.outer_sum(),
        }
    }
}

fn mean_meta_grad(mp: &MetaParams, tasks: &[Task], coordinate: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; mp.q()];
    let w = 1.0 / tasks.len() as f64;
    for t in tasks {
        let g = mp.meta_grad(t)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteHessian {
                task: t.id,
                coordinate,
            });
        }
        linalg::axpy(w, &g, &mut acc);
    }
    Ok(acc)
}

/// Exact meta-Hessian and the relative asymmetry `‖H − Hᵀ‖_F/‖H‖_F` measured
/// before symmetrization.
pub fn exact_meta_hessian_with_asymmetry(
    mp: &MetaParams,
    tasks: &[Task],
    dense_cap: usize,
) -> Result<(HessianRep, f64)> {
    let q = mp.q();
    if q > dense_cap {
        return Err(Error::DenseCapExceeded { q, cap: dense_cap });
    }
    if tasks.is_empty() {
        return Err(Error::Invalid("meta-Hessian of an empty taskset".into()));
    }
    let columns: Vec<Result<Vec<f64>>> = (0..q)
        .into_par_iter()
        .map(|j| {
            let h = 1e-4 * (1.0 + mp.omega[j].abs());
            let mut w = mp.omega.clone();
            w[j] = mp.omega[j] + h;
            let plus = mean_meta_grad(&mp.with_omega(w.clone()), tasks, j)?;
            w[j] = mp.omega[j] - h;
            let minus = mean_meta_grad(&mp.with_omega(w), tasks, j)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect())
        })
        .collect();
    let mut m = Matrix::zeros(q, q);
    for (j, col) in columns.into_iter().enumerate() {
        for (i, x) in col?.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    let scale = m.frobenius();
    let asym = if scale > 0.0 {
        m.sub(&m.transpose()).frobenius() / scale
    } else {
        0.0
    };
    let rep = HessianRep {
        variant: HessianVariant::Dense(SymMatrix::from_matrix(m)?),
        task_count: tasks.len(),
        method: HessianMethod::Exact,
        capacity: None,
    };
    Ok((rep, asym))
}

pub fn exact_meta_hessian(mp: &MetaParams, tasks: &[Task], dense_cap: usize) -> Result<HessianRep> {
    Ok(exact_meta_hessian_with_asymmetry(mp, tasks, dense_cap)?.0)
}

/// `diag(σ) − σσᵀ`
fn softmax_curvature(sigma: &[f64]) -> SymMatrix {
    let c = sigma.len();
    let mut a = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            a[(i, j)] = if i == j { sigma[i] } else { 0.0 } - sigma[i] * sigma[j];
        }
    }
    SymMatrix::from_matrix(a).expect("square")
}

/// Gauss-Newton factor columns contributed by one task, scaled so that
/// summing `VVᵀ` over `task_count` tasks gives the task-averaged matrix.
pub fn gn_columns_for_task(
    mp: &MetaParams,
    task: &Task,
    task_count: usize,
) -> Result<FactorMatrix> {
    let nq = task.query.len();
    let mut out = FactorMatrix::new(mp.q());
    if nq == 0 {
        return Ok(out);
    }
    let scale = 1.0 / ((nq * task_count.max(1)) as f64).sqrt();
    let logits = mp.query_logits(task)?;
    let mut requests = Vec::new();
    for n in 0..nq {
        let root = psd_sqrt_small(&softmax_curvature(&softmax(logits.row(n))))?;
        for k in 0..root.cols() {
            let col = root.column(k);
            if col.iter().any(|&x| x != 0.0) {
                requests.push((n, col));
            }
        }
    }
    for mut v in mp.query_logit_vjps(task, &requests)? {
        v.iter_mut().for_each(|x| *x *= scale);
        out.push(v);
    }
    Ok(out)
}

/// Streams tasks in index order, compressing the factor to at most
/// `capacity` orthogonal columns after every task.
pub fn accumulate_gn(mp: &MetaParams, tasks: &[Task], capacity: usize) -> Result<HessianRep> {
    let m = tasks.len();
    let mut buffer = FactorMatrix::new(mp.q());
    let chunk = rayon::current_num_threads().max(1);
    for group in tasks.chunks(chunk) {
        let cols: Vec<Result<FactorMatrix>> = group
            .par_iter()
            .map(|t| gn_columns_for_task(mp, t, m))
            .collect();
        for c in cols {
            buffer.extend(c?);
            buffer = orthogonalize_keep_largest(&buffer, capacity, None)?;
        }
    }
    Ok(HessianRep {
        variant: HessianVariant::Factored(buffer),
        task_count: m,
        method: HessianMethod::GaussNewton,
        capacity: Some(capacity),
    })
}

/// Dense Gauss-Newton matrix from full logit Jacobians. Quadratic in `q` per
/// sample; the reference the factored path is checked against.
pub fn gn_dense(mp: &MetaParams, tasks: &[Task]) -> Result<HessianRep> {
    let q = mp.q();
    let m = tasks.len().max(1) as f64;
    let mut acc = Matrix::zeros(q, q);
    for task in tasks {
        let nq = task.query.len();
        if nq == 0 {
            continue;
        }
        let logits = mp.query_logits(task)?;
        let jacs = mp.query_logit_jacobian(task)?;
        let w = 1.0 / (nq as f64 * m);
        for (n, jac) in jacs.iter().enumerate() {
            let a = softmax_curvature(&softmax(logits.row(n)));
            let aj = a.matrix().matmul(jac);
            // Jᵀ(AJ) = Σ_k J_kᵀ ⊗ (AJ)_k
            for k in 0..jac.rows() {
                let jk = jac.row(k);
                let ak = aj.row(k);
                for (i, &x) in jk.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    linalg::axpy(w * x, ak, acc.row_mut(i));
                }
            }
        }
    }
    Ok(HessianRep {
        variant: HessianVariant::Dense(SymMatrix::from_matrix(acc)?),
        task_count: tasks.len(),
        method: HessianMethod::GaussNewton,
        capacity: None,
    })
}

/// Pseudo-inverse `H⁺` together with the projector `H⁺H`.
#[derive(Debug, Clone)]
pub struct SpectralInverse {
    pub pinv: SymMatrix,
    pub projector: SymMatrix,
    pub retained: usize,
    /// Negative eigenvalues left out of the inverse (dense input only).
    pub discarded_negative: usize,
    /// Full spectrum, descending (dense input only).
    pub eigenvalues: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl SpectralInverse {
    pub fn q(&self) -> usize {
        self.pinv.dim()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.pinv.matvec(v)
    }

    /// A stand-in inverse equal to the identity (`H⁺ = H⁺H = I`).
    pub fn identity(q: usize) -> Self {
        Self {
            pinv: SymMatrix::identity(q),
            projector: SymMatrix::identity(q),
            retained: q,
            discarded_negative: 0,
            eigenvalues: None,
            warnings: Vec::new(),
        }
    }
}

fn clamp_count(keep: Keep, available: usize, warnings: &mut Vec<String>) -> Keep {
    match keep {
        Keep::Count(k) if k > available => {
            warnings.push(format!(
                "keep={k} exceeds the {available} available directions; clamped"
            ));
            Keep::Count(available)
        }
        other => other,
    }
}

/// Dense input: eigendecomposition then spectral pseudo-inverse. Factored
/// input: pseudo-inverse from the orthogonalized factor columns.
pub fn invert(h: &HessianRep, keep: Keep) -> Result<SpectralInverse> {
    match &h.variant {
        HessianVariant::Dense(m) => invert_eigen(&eigh_symmetric(m)?, keep),
        HessianVariant::Factored(f) => {
            let mut warnings = Vec::new();
            let fi = factor_pseudo_inverse(f, Some(keep))?;
            clamp_count(keep, fi.available, &mut warnings);
            Ok(SpectralInverse {
                pinv: fi.pinv,
                projector: fi.projector,
                retained: fi.retained,
                discarded_negative: 0,
                eigenvalues: None,
                warnings,
            })
        }
    }
}

/// Spectral inverse from an existing eigendecomposition, so several `keep`
/// settings can share one diagonalization.
pub fn invert_eigen(e: &EigenDecomposition, keep: Keep) -> Result<SpectralInverse> {
    let mut warnings = Vec::new();
    let keep = clamp_count(keep, e.dim(), &mut warnings);
    let idx = retained_indices(&e.values, keep)?;
    let negative_total = e.values.iter().filter(|&&l| l < 0.0).count();
    let negative_kept = idx.iter().filter(|&&i| e.values[i] < 0.0).count();
    Ok(SpectralInverse {
        pinv: spectral_sum(e, &idx, |l| 1.0 / l),
        projector: spectral_sum(e, &idx, |_| 1.0),
        retained: idx.len(),
        discarded_negative: negative_total - negative_kept,
        eigenvalues: Some(e.values.clone()),
        warnings,
    })
}

/// Summary of a Hessian spectrum: how many eigenvalues are `≤ 0` and the extremes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub dim: usize,
    pub count_nonpositive: usize,
    pub count_negative: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

pub fn spectrum_summary(values: &[f64]) -> SpectrumSummary {
    SpectrumSummary {
        dim: values.len(),
        count_nonpositive: values.iter().filter(|&&l| l <= 0.0).count(),
        count_negative: values.iter().filter(|&&l| l < 0.0).count(),
        lambda_max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        lambda_min: values.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_dense_prunes_negative() {
        let h = HessianRep {
            variant: HessianVariant::Dense(SymMatrix::diag(&[4.0, 1.0, -3.0])),
            task_count: 1,
            method: HessianMethod::Exact,
            capacity: None,
        };
        let inv = invert(&h, Keep::Count(2)).unwrap();
        assert_eq!(inv.discarded_negative, 1);
        assert_eq!(inv.retained, 2);
        let d = inv
            .pinv
            .matrix()
            .sub(&Matrix::diag(&[0.25, 1.0, 0.0]))
            .max_abs();
        assert!(d < 1e-15);
        assert!(inv.warnings.is_empty());

        let inv = invert(&h, Keep::Count(7)).unwrap();
        assert_eq!(inv.retained, 3);
        assert_eq!(inv.warnings.len(), 1);
    }

    #[test]
    fn invert_positive_definite_is_plain_inverse() {
        let a = SymMatrix::from_matrix(Matrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ]))
        .unwrap();
        let h = HessianRep {
            variant: HessianVariant::Dense(a.clone()),
            task_count: 1,
            method: HessianMethod::Exact,
            capacity: None,
        };
        let inv = invert(&h, Keep::Count(3)).unwrap();
        let prod = a.matrix().matmul(inv.pinv.matrix());
        assert!(prod.sub(&Matrix::identity(3)).max_abs() < 1e-8);
    }

    #[test]
    fn spectrum_counts() {
        let s = spectrum_summary(&[3.0, 0.0, -1.0, -2.0]);
        assert_eq!(s.count_nonpositive, 3);
        assert_eq!(s.count_negative, 2);
        assert_eq!(s.lambda_max, 3.0);
        assert_eq!(s.lambda_min, -2.0);
    }

    #[test]
    fn curvature_of_saturated_softmax_vanishes() {
        let a = softmax_curvature(&[1.0, 0.0]);
        assert_eq!(a.matrix().max_abs(), 0.0);
    }
}
