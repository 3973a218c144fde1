//! Adaptation algorithms, meta-objective derivatives and the meta-training loop.
//!
//! Two learners are supported:
//!
//! * MAML with a single inner gradient step, `θ̂ = ω − α∇L_support(ω)`. The
//!   adaptation Jacobian is `I − α∇²L_support(ω)`, which is symmetric, so
//!   products with it reduce to one Hessian-vector product.
//! * Prototypical networks, where `θ̂ = ω` and the query logits are negative
//!   squared distances to the per-class support centroids in feature space.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, Matrix};
use crate::model::{argmax, log_sum_exp, softmax, Batch, Mlp};

/// Where a task came from when tasksets are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Regular,
    Noise,
}

/// A few-shot episode: support set for adaptation, query set for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    #[serde(default)]
    pub group_id: Option<u64>,
    #[serde(default)]
    pub provenance: Provenance,
    pub n_ways: usize,
    pub support: Batch,
    pub query: Batch,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ways < 2 {
            return Err(Error::Invalid(format!(
                "task {} has fewer than two classes",
                self.id
            )));
        }
        if self.support.dim() != self.query.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.support.dim(),
                got: self.query.dim(),
            });
        }
        self.support.check(self.support.dim(), self.n_ways)?;
        self.query.check(self.support.dim(), self.n_ways)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Learner {
    Maml { inner_lr: f64 },
    ProtoNet,
}

impl Default for Learner {
    fn default() -> Self {
        Learner::Maml { inner_lr: 0.01 }
    }
}

/// Meta-parameters `ω` together with the network they parameterize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub model: Mlp,
    pub learner: Learner,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub theta_hat: Vec<f64>,
    /// `∂θ̂/∂ω` (`p × q`), populated on request.
    pub jacobian: Option<Matrix>,
}

impl MetaParams {
    pub fn new(model: Mlp, learner: Learner, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != model.param_count() {
            return Err(Error::DimensionMismatch {
                expected: model.param_count(),
                got: omega.len(),
            });
        }
        Ok(Self {
            model,
            learner,
            omega,
        })
    }

    /// Fresh meta-parameters with weights drawn by [`Mlp::init_weights`] from `seed`.
    pub fn initialize(spec: crate::model::MlpSpec, learner: Learner, seed: u64) -> Result<Self> {
        let model = Mlp::new(spec)?;
        let omega = model.init_weights(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        Self::new(model, learner, omega)
    }

    pub fn q(&self) -> usize {
        self.omega.len()
    }

    pub fn with_omega(&self, omega: Vec<f64>) -> Self {
        Self {
            model: self.model.clone(),
            learner: self.learner,
            omega,
        }
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        task.validate()?;
        let spec = self.model.spec();
        if task.dim() != spec.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.input_dim(),
                got: task.dim(),
            });
        }
        if let Learner::Maml { .. } = self.learner {
            if task.n_ways != spec.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: spec.output_dim(),
                    got: task.n_ways,
                });
            }
        }
        Ok(())
    }

    /// Runs the inner adaptation on the task's support set.
    pub fn adapt(&self, task: &Task, want_jacobian: bool) -> Result<AdaptResult> {
        self.check_task(task)?;
        match self.learner {
            Learner::Maml { inner_lr } => {
                let g = self.model.grad(&self.omega, &task.support);
                let mut theta = self.omega.clone();
                axpy(-inner_lr, &g, &mut theta);
                let jacobian = want_jacobian.then(|| {
                    let q = self.q();
                    let mut jac = Matrix::identity(q);
                    let mut e = vec![0.0; q];
                    for j in 0..q {
                        e[j] = 1.0;
                        let hv = self.model.hvp(&self.omega, &task.support, &e);
                        e[j] = 0.0;
                        for i in 0..q {
                            jac[(i, j)] -= inner_lr * hv[i];
                        }
                    }
                    jac
                });
                Ok(AdaptResult {
                    theta_hat: theta,
                    jacobian,
                })
            }
            Learner::ProtoNet => {
                class_members(task)?;
                Ok(AdaptResult {
                    theta_hat: self.omega.clone(),
                    jacobian: want_jacobian.then(|| Matrix::identity(self.q())),
                })
            }
        }
    }

    /// `(∂θ̂/∂ω)·v`; for MAML the Jacobian is symmetric so this is also `vᵀ(∂θ̂/∂ω)`.
    pub fn adapt_jvp(&self, task: &Task, v: &[f64]) -> Result<Vec<f64>> {
        self.check_task(task)?;
        match self.learner {
            Learner::Maml { inner_lr } => {
                let mut out = v.to_vec();
                if inner_lr != 0.0 {
                    let hv = self.model.hvp(&self.omega, &task.support, v);
                    axpy(-inner_lr, &hv, &mut out);
                }
                Ok(out)
            }
            Learner::ProtoNet => Ok(v.to_vec()),
        }
    }

    /// Query loss after adaptation.
    pub fn meta_loss(&self, task: &Task) -> Result<f64> {
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                Ok(self.model.loss(&a.theta_hat, &task.query))
            }
            Learner::ProtoNet => {
                self.check_task(task)?;
                Ok(self.proto_forward(task)?.loss)
            }
        }
    }

    /// Query loss and its exact gradient with respect to `ω`.
    pub fn meta_loss_and_grad(&self, task: &Task) -> Result<(f64, Vec<f64>)> {
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                let (loss, gq) = self.model.loss_and_grad(&a.theta_hat, &task.query);
                Ok((loss, self.adapt_jvp(task, &gq)?))
            }
            Learner::ProtoNet => {
                self.check_task(task)?;
                let fw = self.proto_forward(task)?;
                let n = task.query.len() as f64;
                let mut dlogits = fw.probs.clone();
                for (i, &y) in task.query.labels.iter().enumerate() {
                    dlogits[(i, y)] -= 1.0;
                }
                let dlogits = dlogits.scale(1.0 / n);
                Ok((fw.loss, self.proto_logit_vjp(task, &fw, &dlogits)))
            }
        }
    }

    pub fn meta_grad(&self, task: &Task) -> Result<Vec<f64>> {
        Ok(self.meta_loss_and_grad(task)?.1)
    }

    /// `∂L_query/∂θ` at the adapted weights.
    pub fn adapted_loss_grad(&self, task: &Task) -> Result<Vec<f64>> {
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                Ok(self.model.grad(&a.theta_hat, &task.query))
            }
            // θ̂ = ω and the centroids move with θ
            Learner::ProtoNet => self.meta_grad(task),
        }
    }

    /// Query logits after adaptation (`n_query × c`).
    pub fn query_logits(&self, task: &Task) -> Result<Matrix> {
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                Ok(self.model.forward(&a.theta_hat, &task.query.inputs))
            }
            Learner::ProtoNet => {
                self.check_task(task)?;
                Ok(self.proto_forward(task)?.logits)
            }
        }
    }

    /// `Σ_n (∂y_n/∂ω)ᵀ·douts[n]` for the adapted query logits `y_n`.
    pub fn query_logits_vjp(&self, task: &Task, douts: &Matrix) -> Result<Vec<f64>> {
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                let g = self.model.vjp(&a.theta_hat, &task.query.inputs, douts);
                self.adapt_jvp(task, &g)
            }
            Learner::ProtoNet => {
                self.check_task(task)?;
                let fw = self.proto_forward(task)?;
                Ok(self.proto_logit_vjp(task, &fw, douts))
            }
        }
    }

    /// `(∂y_n/∂ω)ᵀ·u` for each `(n, u)` request, adapting only once.
    pub fn query_logit_vjps(
        &self,
        task: &Task,
        requests: &[(usize, Vec<f64>)],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_task(task)?;
        let c = task.n_ways;
        match self.learner {
            Learner::Maml { .. } => {
                let a = self.adapt(task, false)?;
                requests
                    .iter()
                    .map(|(n, u)| {
                        let x =
                            Matrix::from_vec(1, task.dim(), task.query.inputs.row(*n).to_vec())?;
                        let d = Matrix::from_vec(1, c, u.clone())?;
                        let g = self.model.vjp(&a.theta_hat, &x, &d);
                        self.adapt_jvp(task, &g)
                    })
                    .collect()
            }
            Learner::ProtoNet => {
                let fw = self.proto_forward(task)?;
                Ok(requests
                    .iter()
                    .map(|(n, u)| {
                        let mut d = Matrix::zeros(task.query.len(), c);
                        d.row_mut(*n).copy_from_slice(u);
                        self.proto_logit_vjp(task, &fw, &d)
                    })
                    .collect())
            }
        }
    }

    /// Full meta-Jacobian of the adapted query logits, one `c × q` block per
    /// query sample. Quadratic in `q`; intended for checks on small models.
    pub fn query_logit_jacobian(&self, task: &Task) -> Result<Vec<Matrix>> {
        let n = task.query.len();
        let c = task.n_ways;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut jac = Matrix::zeros(c, self.q());
            for k in 0..c {
                let mut d = Matrix::zeros(n, c);
                d[(i, k)] = 1.0;
                jac.row_mut(k)
                    .copy_from_slice(&self.query_logits_vjp(task, &d)?);
            }
            out.push(jac);
        }
        Ok(out)
    }

    pub fn accuracy(&self, task: &Task) -> Result<f64> {
        let logits = self.query_logits(task)?;
        let hits = (0..logits.rows())
            .filter(|&i| argmax(logits.row(i)) == task.query.labels[i])
            .count();
        Ok(hits as f64 / task.query.len() as f64)
    }

    fn proto_forward(&self, task: &Task) -> Result<ProtoForward> {
        let members = class_members(task)?;
        let fs = self.model.forward(&self.omega, &task.support.inputs);
        let fq = self.model.forward(&self.omega, &task.query.inputs);
        let e = fs.cols();
        let mut centroids = Matrix::zeros(task.n_ways, e);
        for (k, idx) in members.iter().enumerate() {
            let row = centroids.row_mut(k);
            for &s in idx {
                axpy(1.0 / idx.len() as f64, fs.row(s), row);
            }
        }
        let nq = task.query.len();
        let mut logits = Matrix::zeros(nq, task.n_ways);
        for i in 0..nq {
            for k in 0..task.n_ways {
                logits[(i, k)] = -sq_dist(fq.row(i), centroids.row(k));
            }
        }
        let mut probs = Matrix::zeros(nq, task.n_ways);
        let mut loss = 0.0;
        for i in 0..nq {
            let z = logits.row(i);
            loss += log_sum_exp(z) - z[task.query.labels[i]];
            probs.row_mut(i).copy_from_slice(&softmax(z));
        }
        Ok(ProtoForward {
            members,
            fq,
            centroids,
            logits,
            probs,
            loss: loss / nq as f64,
        })
    }

    /// Back-propagates `douts` on the prototype logits through query
    /// features and support centroids.
    fn proto_logit_vjp(&self, task: &Task, fw: &ProtoForward, douts: &Matrix) -> Vec<f64> {
        let e = fw.fq.cols();
        let nq = task.query.len();
        let mut d_fq = Matrix::zeros(nq, e);
        let mut d_c = Matrix::zeros(task.n_ways, e);
        for i in 0..nq {
            for k in 0..task.n_ways {
                let u = douts[(i, k)];
                if u == 0.0 {
                    continue;
                }
                for t in 0..e {
                    let diff = fw.fq[(i, t)] - fw.centroids[(k, t)];
                    d_fq[(i, t)] -= 2.0 * u * diff;
                    d_c[(k, t)] += 2.0 * u * diff;
                }
            }
        }
        let ns = task.support.len();
        let mut d_fs = Matrix::zeros(ns, e);
        for (k, idx) in fw.members.iter().enumerate() {
            let w = 1.0 / idx.len() as f64;
            for &s in idx {
                axpy(w, d_c.row(k), d_fs.row_mut(s));
            }
        }
        let mut g = self.model.vjp(&self.omega, &task.query.inputs, &d_fq);
        let gs = self.model.vjp(&self.omega, &task.support.inputs, &d_fs);
        axpy(1.0, &gs, &mut g);
        g
    }
}

struct ProtoForward {
    members: Vec<Vec<usize>>,
    fq: Matrix,
    centroids: Matrix,
    logits: Matrix,
    probs: Matrix,
    loss: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn class_members(task: &Task) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); task.n_ways];
    for (i, &y) in task.support.labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass {
            task: task.id,
            class: k,
        });
    }
    Ok(members)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain gradient descent; used where training must converge tightly.
    Sgd { lr: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub meta_batch: usize,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub seed: u64,
    /// Use every task at every step instead of sampling meta-batches.
    pub full_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            meta_batch: 32,
            steps: 1000,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            seed: 0,
            full_batch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

impl TrainLog {
    /// One JSON object per line: `{step, loss, grad_norm}`.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&serde_json::to_string(r).expect("plain struct"));
            s.push('\n');
        }
        s
    }
}

/// Extra weight `ε` on one task's loss in the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Upweight {
    pub task_index: usize,
    pub epsilon: f64,
}

/// Mean loss and gradient over `indices`, summed in index order.
pub fn batch_loss_grad(
    mp: &MetaParams,
    tasks: &[Task],
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = indices
        .par_iter()
        .map(|&i| mp.meta_loss_and_grad(&tasks[i]))
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; mp.q()];
    let w = 1.0 / indices.len() as f64;
    for part in parts {
        let (l, g) = part?;
        loss += w * l;
        axpy(w, &g, &mut grad);
    }
    Ok((loss, grad))
}

/// Mean query loss and accuracy over a taskset.
pub fn evaluate(mp: &MetaParams, tasks: &[Task]) -> Result<(f64, f64)> {
    let parts: Vec<Result<(f64, f64)>> = tasks
        .par_iter()
        .map(|t| Ok((mp.meta_loss(t)?, mp.accuracy(t)?)))
        .collect();
    let m = tasks.len().max(1) as f64;
    let (mut loss, mut acc) = (0.0, 0.0);
    for p in parts {
        let (l, a) = p?;
        loss += l / m;
        acc += a / m;
    }
    Ok((loss, acc))
}

/// `‖(1/M)Σ ∇ℒⁱ‖₂`
pub fn total_meta_gradient_norm(mp: &MetaParams, tasks: &[Task]) -> Result<f64> {
    let all: Vec<usize> = (0..tasks.len()).collect();
    Ok(norm(&batch_loss_grad(mp, tasks, &all)?.1))
}

pub fn meta_train(
    mp0: &MetaParams,
    tasks: &[Task],
    config: &TrainConfig,
) -> Result<(MetaParams, TrainLog)> {
    meta_train_weighted(mp0, tasks, config, None)
}

/// Meta-training on `(1/|B|)Σ_B ℒⁱ + ε·ℒʲ + λ‖ω‖²/2`.
pub fn meta_train_weighted(
    mp0: &MetaParams,
    tasks: &[Task],
    config: &TrainConfig,
    upweight: Option<Upweight>,
) -> Result<(MetaParams, TrainLog)> {
    if tasks.is_empty() {
        return Err(Error::Invalid(
            "cannot meta-train on an empty taskset".into(),
        ));
    }
    for t in tasks {
        mp0.check_task(t)?;
    }
    let q = mp0.q();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let mut omega = mp0.omega.clone();
    let mut m1 = vec![0.0; q];
    let mut m2 = vec![0.0; q];
    let mut records = Vec::with_capacity(config.steps);
    let all: Vec<usize> = (0..tasks.len()).collect();
    let mut batch = Vec::with_capacity(config.meta_batch);

    for step in 0..config.steps {
        let mp = mp0.with_omega(omega.clone());
        let indices: &[usize] = if config.full_batch {
            &all
        } else {
            batch.clear();
            for _ in 0..config.meta_batch.max(1) {
                batch.push(rng.random_range(0..tasks.len()));
            }
            &batch
        };
        let (mut loss, mut grad) = batch_loss_grad(&mp, tasks, indices)?;
        if let Some(u) = upweight {
            let (l, g) = mp.meta_loss_and_grad(&tasks[u.task_index])?;
            loss += u.epsilon * l;
            axpy(u.epsilon, &g, &mut grad);
        }
        if config.weight_decay != 0.0 {
            loss += 0.5 * config.weight_decay * omega.iter().map(|w| w * w).sum::<f64>();
            axpy(config.weight_decay, &omega, &mut grad);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        records.push(StepRecord {
            step,
            loss,
            grad_norm: norm(&grad),
        });
        match config.optimizer {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..q {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                    omega[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
                }
            }
            Optimizer::Sgd { lr } => axpy(-lr, &grad, &mut omega),
        }
    }

    let trained = mp0.with_omega(omega);
    let (final_loss, final_accuracy) = evaluate(&trained, tasks)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: config.steps,
            loss: final_loss,
        });
    }
    Ok((
        trained,
        TrainLog {
            steps: records,
            final_loss,
            final_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, MlpSpec};

    fn toy_task(id: u64) -> Task {
        let support = Batch::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.9, 0.2],
                vec![-1.0, 0.1],
                vec![-0.8, -0.3],
            ]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let query = Batch::new(
            Matrix::from_rows(&[vec![0.7, -0.1], vec![-0.6, 0.4]]),
            vec![0, 1],
        )
        .unwrap();
        Task {
            id,
            group_id: None,
            provenance: Provenance::Regular,
            n_ways: 2,
            support,
            query,
        }
    }

    fn toy_params(learner: Learner) -> MetaParams {
        let mlp = Mlp::new(MlpSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap()).unwrap();
        let omega = (0..mlp.param_count())
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0)
            .collect();
        MetaParams::new(mlp, learner, omega).unwrap()
    }

    #[test]
    fn zero_inner_lr_is_identity_adaptation() {
        let mp = toy_params(Learner::Maml { inner_lr: 0.0 });
        let a = mp.adapt(&toy_task(0), true).unwrap();
        assert_eq!(a.theta_hat, mp.omega);
        assert_eq!(a.jacobian.unwrap(), Matrix::identity(mp.q()));
        let g = mp.meta_grad(&toy_task(0)).unwrap();
        assert_eq!(g, mp.model.grad(&mp.omega, &toy_task(0).query));
    }

    #[test]
    fn maml_jacobian_is_symmetric_and_matches_jvp() {
        let mp = toy_params(Learner::Maml { inner_lr: 0.3 });
        let task = toy_task(0);
        let jac = mp.adapt(&task, true).unwrap().jacobian.unwrap();
        let asym = jac.sub(&jac.transpose()).max_abs();
        assert!(asym <= 1e-9, "asymmetry {asym:e}");
        let v: Vec<f64> = (0..mp.q()).map(|i| (i as f64).sin()).collect();
        let a = jac.matvec(&v);
        let b = mp.adapt_jvp(&task, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn protonet_rejects_empty_class() {
        let mp = toy_params(Learner::ProtoNet);
        let mut task = toy_task(3);
        task.support.labels = vec![0, 0, 0, 0];
        assert!(matches!(
            mp.adapt(&task, false),
            Err(Error::EmptyClass { task: 3, class: 1 })
        ));
    }

    #[test]
    fn protonet_jacobian_is_identity() {
        let mp = toy_params(Learner::ProtoNet);
        let a = mp.adapt(&toy_task(0), true).unwrap();
        assert_eq!(a.theta_hat, mp.omega);
        assert_eq!(a.jacobian.unwrap(), Matrix::identity(mp.q()));
    }

    #[test]
    fn duplicated_query_keeps_mean_loss() {
        for learner in [Learner::Maml { inner_lr: 0.1 }, Learner::ProtoNet] {
            let mp = toy_params(learner);
            let task = toy_task(0);
            let mut doubled = task.clone();
            doubled.query = task.query.concat(&task.query);
            let a = mp.meta_loss(&task).unwrap();
            let b = mp.meta_loss(&doubled).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut mp = toy_params(Learner::Maml { inner_lr: 0.0 });
        mp.omega.iter_mut().for_each(|w| *w = 0.0);
        assert!((mp.meta_loss(&toy_task(0)).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let mp = toy_params(Learner::Maml { inner_lr: 0.1 });
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (out, log) = meta_train(&mp, &[toy_task(0)], &cfg).unwrap();
        assert_eq!(out, mp);
        assert!(log.steps.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic_and_logs_json_lines() {
        let mp = toy_params(Learner::Maml { inner_lr: 0.1 });
        let tasks = vec![toy_task(0), toy_task(1)];
        let cfg = TrainConfig {
            steps: 20,
            meta_batch: 3,
            seed: 5,
            ..Default::default()
        };
        let (a, la) = meta_train(&mp, &tasks, &cfg).unwrap();
        let (b, lb) = meta_train(&mp, &tasks, &cfg).unwrap();
        assert_eq!(a.omega, b.omega);
        assert_eq!(la, lb);
        let lines = la.to_json_lines();
        assert_eq!(lines.lines().count(), 20);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert!(first.get("grad_norm").is_some());
    }

    #[test]
    fn divergence_names_the_step() {
        let mp = toy_params(Learner::Maml { inner_lr: 0.1 });
        let mut task = toy_task(0);
        task.query.inputs[(0, 0)] = f64::NAN;
        let cfg = TrainConfig {
            steps: 5,
            ..Default::default()
        };
        let r = meta_train(&mp, &[task], &cfg);
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn empty_taskset_is_rejected() {
        let mp = toy_params(Learner::ProtoNet);
        assert!(meta_train(&mp, &[], &TrainConfig::default()).is_err());
    }
}
