//! Dense real linear algebra used by the influence engine.
//!
//! Everything here works on small-to-medium dense matrices (up to a couple of
//! thousand rows). Matrices are stored row-major in a flat `Vec<f64>`.
//!
//! The symmetric eigensolver is a cyclic Jacobi method using a round-robin
//! ordering: each round applies `n/2` disjoint plane rotations at once, so the
//! row and column updates stream through contiguous memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s * x`
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Square matrix with exactly symmetric storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Symmetrizes `(A + Aᵀ)/2`. Fails if `a` is not square.
    pub fn from_matrix(mut a: Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::DimensionMismatch {
                expected: a.rows,
                got: a.cols,
            });
        }
        let n = a.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (a[(i, j)] + a[(j, i)]);
                a[(i, j)] = m;
                a[(j, i)] = m;
            }
        }
        Ok(Self(a))
    }

    /// Builds from the upper triangle only, mirroring it into the lower one.
    pub(crate) fn from_upper(mut a: Matrix) -> Self {
        let n = a.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                a[(j, i)] = a[(i, j)];
            }
        }
        Self(a)
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn diag(values: &[f64]) -> Self {
        Self(Matrix::diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.0.matvec(v)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Adds `s` to every diagonal entry.
    pub fn add_diagonal(&mut self, s: f64) {
        for i in 0..self.dim() {
            self.0[(i, i)] += s;
        }
    }
}

/// Accumulates `s * v vᵀ` into the upper triangle of `m`.
fn add_outer_upper(m: &mut Matrix, v: &[f64], s: f64) {
    let n = v.len();
    for i in 0..n {
        let vi = s * v[i];
        if vi == 0.0 {
            continue;
        }
        let row = &mut m.row_mut(i)[i..];
        for (o, &vj) in row.iter_mut().zip(&v[i..]) {
            *o += vi * vj;
        }
    }
}

/// Eigenpairs of a symmetric matrix, sorted by descending (signed) eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector paired with `values[i]`.
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i)
    }

    /// `Σ λᵢ qᵢqᵢᵀ` over the given indices.
    pub fn reconstruct(&self, indices: &[usize]) -> SymMatrix {
        let qt = self.vectors.transpose();
        let mut out = Matrix::zeros(self.dim(), self.dim());
        for &i in indices {
            add_outer_upper(&mut out, qt.row(i), self.values[i]);
        }
        SymMatrix::from_upper(out)
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 60;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for (j, &x) in a.row(i).iter().enumerate() {
            if i != j {
                s += x * x;
            }
        }
    }
    s.sqrt()
}

/// Round-robin pairings: `n - 1` rounds (n rounded up to even) covering every
/// unordered pair exactly once. Pairs touching the padding index are dropped.
fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    let m = n + (n % 2);
    let mut players: Vec<usize> = (0..m).collect();
    let mut rounds = Vec::with_capacity(m.saturating_sub(1));
    for _ in 0..m.saturating_sub(1) {
        let mut pairs = Vec::with_capacity(m / 2);
        for i in 0..m / 2 {
            let (a, b) = (players[i], players[m - 1 - i]);
            if a < n && b < n {
                pairs.push((a.min(b), a.max(b)));
            }
        }
        rounds.push(pairs);
        // keep players[0] fixed, rotate the rest
        let last = players[m - 1];
        for k in (2..m).rev() {
            players[k] = players[k - 1];
        }
        if m > 1 {
            players[1] = last;
        }
    }
    rounds
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (head, tail) = m.data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm falls below `1e-12‖A‖_F`.
/// Eigenvalues come back sorted descending; ties keep their diagonal order.
pub fn eigh_symmetric(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if !a.0.is_finite() {
        return Err(Error::Invalid("matrix has non-finite entries".into()));
    }
    let mut w = a.0.clone();
    // rows of `vt` are the accumulated eigenvectors
    let mut vt = Matrix::identity(n);
    let scale = w.frobenius();
    let rounds = round_robin(n);
    let mut rotations: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(n / 2 + 1);

    let mut converged = scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        let off = off_diagonal_norm(&w);
        if off <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                residual: off / scale,
            });
        }
        sweeps += 1;
        for pairs in &rounds {
            rotations.clear();
            for &(p, q) in pairs {
                let apq = w[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                // negligible coupling: the rotation would be the identity in floating point
                if apq.abs() < 1e-300
                    || apq.abs() <= f64::EPSILON * 1e-3 * (app.abs() * aqq.abs()).sqrt()
                {
                    w[(p, q)] = 0.0;
                    w[(q, p)] = 0.0;
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                rotations.push((p, q, c, t * c));
            }
            if rotations.is_empty() {
                continue;
            }
            // Jᵀ A: rotate row pairs
            for &(p, q, c, s) in &rotations {
                rotate_rows(&mut w, p, q, c, s);
            }
            // (Jᵀ A) J: rotate column pairs, row by row
            for i in 0..n {
                let row = w.row_mut(i);
                for &(p, q, c, s) in &rotations {
                    let (a, b) = (row[p], row[q]);
                    row[p] = c * a - s * b;
                    row[q] = s * a + c * b;
                }
            }
            for &(p, q, c, s) in &rotations {
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
    }
    debug_assert!(converged);

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps diagonal order for equal eigenvalues
    order.sort_by(|&i, &j| {
        w[(j, j)]
            .partial_cmp(&w[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| w[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for (r, &x) in vt.row(i).iter().enumerate() {
            vectors[(r, col)] = x;
        }
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Which eigen-directions are treated as non-zero when inverting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Keep {
    /// The `k` largest (signed) eigenvalues.
    Count(usize),
    /// Eigenvalues strictly above `τ·λ_max`; never retains non-positive ones.
    Threshold(f64),
    /// Eigenvalues with `|λ| > τ·max|λ|`, of either sign (an unpruned inverse).
    Magnitude(f64),
}

/// Indices of retained eigenpairs, in descending eigenvalue order.
pub fn retained_indices(values: &[f64], keep: Keep) -> Result<Vec<usize>> {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let idx: Vec<usize> = match keep {
        Keep::Count(k) => (0..k.min(values.len())).collect(),
        Keep::Threshold(tau) => {
            let lmax = values.first().copied().unwrap_or(0.0);
            (0..values.len())
                .filter(|&i| lmax > 0.0 && values[i] > tau * lmax)
                .collect()
        }
        Keep::Magnitude(tau) => (0..values.len())
            .filter(|&i| scale > 0.0 && values[i].abs() > tau * scale)
            .collect(),
    };
    for &i in &idx {
        if values[i].abs() <= 1e-12 * scale {
            return Err(Error::IllConditioned {
                value: values[i],
                scale,
            });
        }
    }
    Ok(idx)
}

/// Moore–Penrose style inverse restricted to the retained eigen-directions:
/// `Σ qᵢqᵢᵀ/λᵢ`.
pub fn pseudo_inverse_spectral(e: &EigenDecomposition, keep: Keep) -> Result<SymMatrix> {
    let idx = retained_indices(&e.values, keep)?;
    Ok(spectral_sum(e, &idx, |l| 1.0 / l))
}

/// `Σ_{i ∈ idx} f(λᵢ) qᵢqᵢᵀ`
pub(crate) fn spectral_sum(
    e: &EigenDecomposition,
    idx: &[usize],
    f: impl Fn(f64) -> f64,
) -> SymMatrix {
    let n = e.dim();
    let qt = e.vectors.transpose();
    let mut out = Matrix::zeros(n, n);
    for &i in idx {
        add_outer_upper(&mut out, qt.row(i), f(e.values[i]));
    }
    SymMatrix::from_upper(out)
}

/// Factor `C` with `CCᵀ = A` for a small PSD matrix.
///
/// Column `i` is `√λᵢ qᵢ`; directions with `λᵢ < 1e-12` give zero columns.
pub fn psd_sqrt_small(a: &SymMatrix) -> Result<Matrix> {
    let e = eigh_symmetric(a)?;
    let n = a.dim();
    let mut c = Matrix::zeros(n, n);
    for (j, &l) in e.values.iter().enumerate() {
        if l < -1e-10 {
            return Err(Error::NotPsd(l));
        }
        if l < 1e-12 {
            continue;
        }
        let r = l.sqrt();
        for i in 0..n {
            c[(i, j)] = r * e.vectors[(i, j)];
        }
    }
    Ok(c)
}

/// Low-rank factor `V` representing `Σ vᵢvᵢᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
}

impl FactorMatrix {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            columns: Vec::new(),
        }
    }

    pub fn from_columns(rows: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: c.len(),
            });
        }
        Ok(Self { rows, columns })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn push(&mut self, column: Vec<f64>) {
        assert_eq!(column.len(), self.rows, "factor column length");
        self.columns.push(column);
    }

    pub fn extend(&mut self, other: FactorMatrix) {
        assert_eq!(other.rows, self.rows, "factor row count");
        self.columns.extend(other.columns);
    }

    /// Dense `VVᵀ`.
    pub fn outer_sum(&self) -> SymMatrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for c in &self.columns {
            add_outer_upper(&mut out, c, 1.0);
        }
        SymMatrix::from_upper(out)
    }

    /// `VᵀV`
    pub fn gram(&self) -> SymMatrix {
        let r = self.columns.len();
        let mut g = Matrix::zeros(r, r);
        for i in 0..r {
            for j in i..r {
                g[(i, j)] = dot(&self.columns[i], &self.columns[j]);
            }
        }
        SymMatrix::from_upper(g)
    }
}

/// Columns of `VO` where `VᵀV = OΛOᵀ`, re-orthogonalized, sorted by
/// descending norm. Returns `(column, norm)` pairs; `Σ vᵢvᵢᵀ` equals `VVᵀ`.
fn rotated_columns(v: &FactorMatrix) -> Result<Vec<(Vec<f64>, f64)>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let e = eigh_symmetric(&v.gram())?;
    let r = v.len();
    let ot = e.vectors.transpose();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        if e.values[i] <= 0.0 {
            // Gram eigenvalues below zero are rounding noise of a null direction
            continue;
        }
        let mut col = vec![0.0; v.rows];
        for (coef, src) in ot.row(i).iter().zip(&v.columns) {
            axpy(*coef, src, &mut col);
        }
        out.push(col);
    }
    // one modified Gram-Schmidt pass cleans up the small columns, whose
    // mutual orthogonality is only as good as ε·λ_max/λ
    for i in 0..out.len() {
        let (done, rest) = out.split_at_mut(i);
        let col = &mut rest[0];
        for prev in done.iter() {
            let pn = dot(prev, prev);
            if pn > 0.0 {
                let c = dot(prev, col) / pn;
                axpy(-c, prev, col);
            }
        }
    }
    let mut with_norms: Vec<(Vec<f64>, f64)> = out
        .into_iter()
        .map(|c| {
            let n = norm(&c);
            (c, n)
        })
        .collect();
    with_norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(with_norms)
}

/// Orthogonalizes the columns of `cols` (preserving `Σ vᵢvᵢᵀ`), drops those
/// with norm `≤ drop_tol` and keeps at most `capacity` of the largest.
///
/// `drop_tol` defaults to `1e-9` times the largest incoming column norm.
pub fn orthogonalize_keep_largest(
    cols: &FactorMatrix,
    capacity: usize,
    drop_tol: Option<f64>,
) -> Result<FactorMatrix> {
    let capacity = capacity.max(1);
    let largest = cols.columns.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let tol = drop_tol.unwrap_or(1e-9 * largest);
    let kept = rotated_columns(cols)?
        .into_iter()
        .filter(|(_, n)| *n > tol)
        .take(capacity)
        .map(|(c, _)| c)
        .collect();
    Ok(FactorMatrix {
        rows: cols.rows,
        columns: kept,
    })
}

pub(crate) struct FactorInverse {
    pub pinv: SymMatrix,
    pub projector: SymMatrix,
    pub retained: usize,
    /// Non-vanishing orthogonal directions before `keep` was applied.
    pub available: usize,
}

/// Pseudo-inverse of `VVᵀ` without forming or diagonalizing it.
///
/// The columns `vᵢ` of `VO` are orthogonal and `VVᵀ` has eigenvalues `|vᵢ|²`,
/// so `keep` selects among them exactly as it would among eigenvalues.
pub(crate) fn factor_pseudo_inverse(v: &FactorMatrix, keep: Option<Keep>) -> Result<FactorInverse> {
    let cols = rotated_columns(v)?;
    let largest = cols.first().map_or(0.0, |c| c.1);
    let eps = 1e-10 * largest;
    let cols: Vec<(Vec<f64>, f64)> = cols.into_iter().filter(|(_, n)| *n > eps).collect();
    let available = cols.len();
    let idx: Vec<usize> = match keep {
        None => (0..available).collect(),
        Some(k) => {
            let values: Vec<f64> = cols.iter().map(|(_, n)| n * n).collect();
            retained_indices(&values, k)?
        }
    };
    let q = v.rows;
    let mut pinv = Matrix::zeros(q, q);
    let mut proj = Matrix::zeros(q, q);
    for &i in &idx {
        let (c, n) = &cols[i];
        let n2 = n * n;
        add_outer_upper(&mut pinv, c, 1.0 / (n2 * n2));
        add_outer_upper(&mut proj, c, 1.0 / n2);
    }
    Ok(FactorInverse {
        pinv: SymMatrix::from_upper(pinv),
        projector: SymMatrix::from_upper(proj),
        retained: idx.len(),
        available,
    })
}

/// `(VVᵀ)⁺ = Σ vᵢvᵢᵀ/|vᵢ|⁴` over the columns of `VO`.
pub fn pseudo_inverse_from_factor(v: &FactorMatrix) -> Result<SymMatrix> {
    Ok(factor_pseudo_inverse(v, None)?.pinv)
}
