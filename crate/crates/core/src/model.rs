//! Feed-forward softmax classifier with exact derivative primitives.
//!
//! Weights are packed into one flat vector, layer by layer; within a layer the
//! `out × in` weight matrix (row-major, one row per output unit) comes first,
//! followed by the `out` biases. The last layer is linear and produces logits.
//!
//! Hessian-vector products are computed exactly by running the reverse pass
//! over forward-mode dual numbers.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Scalar type the network can be evaluated over.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(x: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `re + du·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.du * o.re + self.re * o.du)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let r = self.re / o.re;
        Dual::new(r, (self.du - r * o.du) / o.re)
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Self) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Real for Dual {
    fn cst(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.du)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.du)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z.re() > 0.0 {
                    z
                } else {
                    T::cst(0.0)
                }
            }
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Real>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::cst(1.0) - a * a,
            Activation::Relu => T::cst(if a.re() > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

/// Layer widths `input → hidden… → classes` plus one activation per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// All hidden layers use `activation`.
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = layer_widths.len().saturating_sub(2);
        let spec = Self {
            layer_widths,
            activations: vec![activation; hidden],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 {
            return Err(Error::Invalid("an MLP needs at least one layer".into()));
        }
        if w.iter().any(|&x| x == 0) {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        if *w.last().unwrap() < 2 {
            return Err(Error::Invalid(
                "the output layer needs at least two classes".into(),
            ));
        }
        if self.activations.len() != w.len() - 2 {
            return Err(Error::Invalid(format!(
                "{} hidden layers but {} activations",
                w.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offsets of (weights, biases) for layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let before: usize = self.layer_widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (nin, nout) = (self.layer_widths[l], self.layer_widths[l + 1]);
        (before, before + nin * nout)
    }
}

/// Inputs (`n × d`) and class labels of a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Checks labels against `classes` and the input width against `dim`.
    pub fn check(&self, dim: usize, classes: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.dim(),
            });
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Concatenation of two batches with the same input width.
    pub fn concat(&self, other: &Batch) -> Batch {
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch {
            inputs: Matrix::from_vec(labels.len(), self.dim(), data).expect("consistent widths"),
            labels,
        }
    }
}

/// Log-sum-exp stabilized by the maximum logit.
pub(crate) fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let m = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.re()));
    let mut s = T::cst(0.0);
    for &v in z {
        s += (v - T::cst(m)).exp();
    }
    T::cst(m) + s.ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Multilayer perceptron evaluated on flat weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init_weights(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut w = vec![0.0; self.param_count()];
        for l in 0..self.spec.num_layers() {
            let (wo, bo) = self.spec.layer_offsets(l);
            let std = 1.0 / (self.spec.layer_widths[l] as f64).sqrt();
            for x in &mut w[wo..bo] {
                let g: f64 = StandardNormal.sample(rng);
                *x = std * g;
            }
        }
        w
    }

    /// Post-activation values of every layer; `acts[0]` is the input and the
    /// last entry holds the logits.
    fn forward_one<T: Real>(&self, w: &[T], x: &[f64]) -> Vec<Vec<T>> {
        let spec = &self.spec;
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(spec.layer_widths.len());
        acts.push(x.iter().map(|&v| T::cst(v)).collect());
        for l in 0..spec.num_layers() {
            let (nin, nout) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let (wo, bo) = spec.layer_offsets(l);
            let a = &acts[l];
            let mut z = Vec::with_capacity(nout);
            for o in 0..nout {
                let row = &w[wo + o * nin..wo + (o + 1) * nin];
                let mut s = w[bo + o];
                for (wi, ai) in row.iter().zip(a) {
                    s += *wi * *ai;
                }
                z.push(s);
            }
            if l + 1 < spec.num_layers() {
                let act = spec.activations[l];
                for v in &mut z {
                    *v = act.apply(*v);
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates `J(x)ᵀ·dout` into `grad`, where `J` is the logit Jacobian.
    fn backward_one<T: Real>(&self, w: &[T], acts: &[Vec<T>], dout: Vec<T>, grad: &mut [T]) {
        let spec = &self.spec;
        let mut delta = dout;
        for l in (0..spec.num_layers()).rev() {
            let (nin, nout) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let (wo, bo) = spec.layer_offsets(l);
            let a_in = &acts[l];
            for o in 0..nout {
                let d = delta[o];
                grad[bo + o] += d;
                let g = &mut grad[wo + o * nin..wo + (o + 1) * nin];
                for (gi, ai) in g.iter_mut().zip(a_in) {
                    *gi += d * *ai;
                }
            }
            if l > 0 {
                let mut d_in = vec![T::cst(0.0); nin];
                for o in 0..nout {
                    let d = delta[o];
                    let row = &w[wo + o * nin..wo + (o + 1) * nin];
                    for (di, wi) in d_in.iter_mut().zip(row) {
                        *di += *wi * d;
                    }
                }
                let act = spec.activations[l - 1];
                for (di, ai) in d_in.iter_mut().zip(a_in) {
                    *di = *di * act.derivative_from_output(*ai);
                }
                delta = d_in;
            }
        }
    }

    /// Mean cross-entropy and its gradient, over any scalar type.
    pub(crate) fn loss_grad_generic<T: Real>(&self, w: &[T], batch: &Batch) -> (T, Vec<T>) {
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let mut grad = vec![T::cst(0.0); w.len()];
        let mut total = T::cst(0.0);
        for i in 0..n {
            let acts = self.forward_one(w, batch.inputs.row(i));
            let z = acts.last().unwrap();
            let y = batch.labels[i];
            let lse = log_sum_exp(z);
            total += lse - z[y];
            let dout: Vec<T> = z
                .iter()
                .enumerate()
                .map(|(k, &zk)| {
                    let p = (zk - lse).exp();
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - T::cst(t)) * T::cst(scale)
                })
                .collect();
            self.backward_one(w, &acts, dout, &mut grad);
        }
        (total * T::cst(scale), grad)
    }

    pub fn forward(&self, w: &[f64], inputs: &Matrix) -> Matrix {
        let c = self.spec.output_dim();
        let mut out = Matrix::zeros(inputs.rows(), c);
        for i in 0..inputs.rows() {
            let acts = self.forward_one(w, inputs.row(i));
            out.row_mut(i).copy_from_slice(acts.last().unwrap());
        }
        out
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, w: &[f64], batch: &Batch) -> f64 {
        let logits = self.forward(w, &batch.inputs);
        let total: f64 = (0..batch.len())
            .map(|i| {
                let z = logits.row(i);
                log_sum_exp(z) - z[batch.labels[i]]
            })
            .sum();
        total / batch.len() as f64
    }

    pub fn loss_and_grad(&self, w: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
        self.loss_grad_generic(w, batch)
    }

    pub fn grad(&self, w: &[f64], batch: &Batch) -> Vec<f64> {
        self.loss_grad_generic(w, batch).1
    }

    /// Exact Hessian-vector product `(∂²L/∂w∂w)·v`.
    pub fn hvp(&self, w: &[f64], batch: &Batch, v: &[f64]) -> Vec<f64> {
        let wd: Vec<Dual> = w.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let (_, g) = self.loss_grad_generic(&wd, batch);
        g.into_iter().map(|d| d.du).collect()
    }

    /// Per-sample logit Jacobians `∂y_n/∂w`, each `c × p`.
    pub fn output_jacobian(&self, w: &[f64], inputs: &Matrix) -> Vec<Matrix> {
        let c = self.spec.output_dim();
        let p = self.param_count();
        (0..inputs.rows())
            .map(|i| {
                let acts = self.forward_one(w, inputs.row(i));
                let mut jac = Matrix::zeros(c, p);
                for k in 0..c {
                    let mut dout = vec![0.0; c];
                    dout[k] = 1.0;
                    self.backward_one(w, &acts, dout, jac.row_mut(k));
                }
                jac
            })
            .collect()
    }

    /// `Σ_n J_nᵀ·douts[n]` with one `c`-vector per input row.
    pub fn vjp(&self, w: &[f64], inputs: &Matrix, douts: &Matrix) -> Vec<f64> {
        let mut grad = vec![0.0; self.param_count()];
        for i in 0..inputs.rows() {
            if douts.row(i).iter().all(|&d| d == 0.0) {
                continue;
            }
            let acts = self.forward_one(w, inputs.row(i));
            self.backward_one(w, &acts, douts.row(i).to_vec(), &mut grad);
        }
        grad
    }

    pub fn predict(&self, w: &[f64], inputs: &Matrix) -> Vec<usize> {
        let logits = self.forward(w, inputs);
        (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
    }

    pub fn accuracy(&self, w: &[f64], batch: &Batch) -> f64 {
        let pred = self.predict(w, &batch.inputs);
        let hits = pred
            .iter()
            .zip(&batch.labels)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / batch.len() as f64
    }
}

/// Index of the largest entry; the first wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn tiny() -> (Mlp, Vec<f64>, Batch) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let mlp = Mlp::new(MlpSpec::new(vec![3, 4, 3], Activation::Tanh).unwrap()).unwrap();
        let w = mlp.init_weights(&mut rng);
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch::new(Matrix::from_vec(5, 3, x).unwrap(), vec![0, 1, 2, 1, 0]).unwrap();
        (mlp, w, batch)
    }

    #[test]
    fn packing_layout() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(spec.layer_offsets(0), (0, 12));
        assert_eq!(spec.layer_offsets(1), (16, 24));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let (mlp, w, batch) = tiny();
        let z = vec![0.0; w.len()];
        assert_eq!(mlp.forward(&z, &batch.inputs).max_abs(), 0.0);
        assert!((mlp.loss(&z, &batch) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_layer_unit_input_reads_weight_rows() {
        let mlp = Mlp::new(MlpSpec::new(vec![2, 3], Activation::Tanh).unwrap()).unwrap();
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0];
        let logits = mlp.forward(&w, &Matrix::from_rows(&[vec![1.0, 0.0]]));
        assert_eq!(logits.row(0), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn saturated_correct_loss_is_tiny() {
        let mlp = Mlp::new(MlpSpec::new(vec![1, 2], Activation::Tanh).unwrap()).unwrap();
        // logits (20, -20) for input 1
        let w = vec![20.0, -20.0, 0.0, 0.0];
        let b = Batch::new(Matrix::from_rows(&[vec![1.0]]), vec![0]).unwrap();
        assert!(mlp.loss(&w, &b) <= 1e-8);
    }

    #[test]
    fn loss_shift_invariance() {
        let z = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.25).collect();
        let a = log_sum_exp(&z) - z[1];
        let b = log_sum_exp(&shifted) - shifted[1];
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn grad_is_mean_of_per_sample_grads() {
        let (mlp, w, batch) = tiny();
        let g = mlp.grad(&w, &batch);
        let mut mean = vec![0.0; g.len()];
        for i in 0..batch.len() {
            let one = Batch::new(
                Matrix::from_rows(&[batch.inputs.row(i).to_vec()]),
                vec![batch.labels[i]],
            )
            .unwrap();
            crate::linalg::axpy(1.0 / batch.len() as f64, &mlp.grad(&w, &one), &mut mean);
        }
        for (a, b) in g.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hvp_of_zero_is_zero() {
        let (mlp, w, batch) = tiny();
        let hv = mlp.hvp(&w, &batch, &vec![0.0; w.len()]);
        assert!(hv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn last_layer_bias_jacobian_is_one_hot() {
        let (mlp, w, batch) = tiny();
        let (_, bo) = mlp.spec().layer_offsets(1);
        for jac in mlp.output_jacobian(&w, &batch.inputs) {
            for k in 0..3 {
                for j in 0..3 {
                    assert_eq!(jac[(k, bo + j)], if j == k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_columns() {
        let (mlp, w, _) = tiny();
        let jac = &mlp.output_jacobian(&w, &Matrix::zeros(1, 3))[0];
        let (wo, bo) = mlp.spec().layer_offsets(0);
        for k in 0..3 {
            assert!((wo..bo).all(|j| jac[(k, j)] == 0.0));
        }
    }

    #[test]
    fn dual_arithmetic() {
        let x = Dual::new(2.0, 1.0);
        let y = x * x / (x + Dual::cst(1.0));
        // d/dx x²/(x+1) = (x² + 2x)/(x+1)² = 8/9
        assert!((y.du - 8.0 / 9.0).abs() < 1e-15);
        assert!((x.ln().du - 0.5).abs() < 1e-15);
    }
}
