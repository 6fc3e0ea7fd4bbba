//! Losses, gradient computation for the two training regimes, optimizers and
//! the epoch loop.
//!
//! * Sampled pooling trains with permutation-sampled SGD: each example gets
//!   its own uniformly drawn ordering `s_i` every step, and the loss is
//!   `L(y_i, rho(f(h_{s_i})))`. Averaged over orderings this is the gradient
//!   of the permuted-loss objective `J = mean_i E_s L(y_i, rho(f(h_s)))`,
//!   which upper-bounds the pooled loss for convex `L` and linear `rho`.
//! * Exact, k-ary and canonical pooling back-propagate through every pooling
//!   term; the shared `f` parameters accumulate one contribution per term.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::nets::{Gradients, Model, NetError, ParamSet};
use crate::perm::{self, Permutation};
use crate::pooling::{self, CanonicalKey, Head, PoolError, PoolingSpec, SequenceFunction, Strategy};
use crate::seed;
use crate::tasks::{self, MetricKind, Metrics, Split, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid training config: {0}")]
    Config(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Net(e.into())
    }
}

impl From<PoolError> for TrainError {
    fn from(e: PoolError) -> Self {
        TrainError::Net(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `eta_t = base_lr / (1 + t * lr_decay)`.
    SgdSchedule,
    #[default]
    AdamStyle,
}

pub const DEFAULT_LR_GRID: [f64; 4] = [0.01, 0.001, 0.0001, 0.00001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    /// Learning rates to search on a validation split. A single entry is
    /// used directly on the full training set; empty falls back to
    /// `base_lr`.
    #[serde(default = "default_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub variance_reg_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-step decay in `eta_t = lr / (1 + t * decay)`. Defaults to 1e-3
    /// for the SGD schedule and to no decay for adam_style.
    #[serde(default)]
    pub lr_decay: Option<f64>,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Test metrics are recorded every this many epochs, and always at the
    /// last one. Zero means last epoch only.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Fit the output affine map to the training targets before training.
    #[serde(default = "default_true")]
    pub standardize_targets: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_grid() -> Vec<f64> {
    DEFAULT_LR_GRID.to_vec()
}
fn default_batch() -> usize {
    128
}
const DEFAULT_SGD_DECAY: f64 = 1e-3;
fn default_validation() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamStyle,
            base_lr: default_lr(),
            lr_grid: default_grid(),
            batch_size: default_batch(),
            epochs: 1000,
            loss: LossKind::L1,
            variance_reg_weight: 0.0,
            seed: 0,
            lr_decay: None,
            validation_fraction: default_validation(),
            eval_every: default_eval_every(),
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr_grid = vec![lr];
        self.base_lr = lr;
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if self.variance_reg_weight < 0.0 || !self.variance_reg_weight.is_finite() {
            return Err("variance_reg_weight must be a finite non-negative number".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err("validation_fraction must lie in [0, 1)".into());
        }
        for &lr in self.lr_grid.iter().chain(std::iter::once(&self.base_lr)) {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(format!("learning rate {lr} must be positive"));
            }
            if self.optimizer == OptimizerKind::SgdSchedule && lr >= 1.0 {
                return Err(format!("SGD schedule rates must lie in (0, 1), got {lr}"));
            }
        }
        match self.lr_decay {
            Some(d) if !(d >= 0.0 && d.is_finite()) => return Err("lr_decay must be finite and non-negative".into()),
            Some(d) if d == 0.0 && self.optimizer == OptimizerKind::SgdSchedule => {
                return Err("SGD schedule needs a positive lr_decay so the rates vanish".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn decay(&self) -> f64 {
        match (self.lr_decay, self.optimizer) {
            (Some(d), _) => d,
            (None, OptimizerKind::SgdSchedule) => DEFAULT_SGD_DECAY,
            (None, OptimizerKind::AdamStyle) => 0.0,
        }
    }

    fn rates(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            vec![self.base_lr]
        } else {
            self.lr_grid.clone()
        }
    }
}

/// `|pred - target|` or `(pred - target)^2`.
pub fn loss(kind: LossKind, pred: f64, target: f64) -> f64 {
    match kind {
        LossKind::L1 => (pred - target).abs(),
        LossKind::Mse => (pred - target).powi(2),
    }
}

/// Batch-mean loss of `pred: [B, 1]` against constant targets.
pub fn loss_node(g: &mut Graph, kind: LossKind, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
    let y = g.constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let diff = g.sub(pred, y)?;
    let per = match kind {
        LossKind::L1 => g.abs(diff)?,
        LossKind::Mse => g.square(diff)?,
    };
    Ok(g.mean(per)?)
}

/// Sorts each example's digits under the canonical key.
pub fn sort_inputs(xs: &[Vec<usize>], key: CanonicalKey) -> Vec<Vec<usize>> {
    xs.iter()
        .map(|x| {
            let mut s = x.clone();
            s.sort_unstable();
            if key == CanonicalKey::Descending {
                s.reverse();
            }
            s
        })
        .collect()
}

/// `rho(pool(f))` for the deterministic strategies, `[B, out]`.
///
/// MLP `f` goes through [`Model::mlp_tuple_mean`]; everything else through
/// the generic pooling of embedded positions.
pub fn pooled_forward(
    g: &mut Graph,
    model: &Model,
    ids: &[NodeId],
    pooling: &PoolingSpec,
    xs: &[Vec<usize>],
) -> Result<NodeId> {
    if model.spec.f_arch.is_recurrent() || pooling.strategy == Strategy::Exact {
        return pooled_forward_generic(g, model, ids, pooling, xs);
    }
    let (_, rho) = model.bind(ids);
    let n = xs.first().map_or(0, Vec::len);
    let k = model.spec.k.unwrap_or(1);
    let pooled = match pooling.strategy {
        Strategy::Kary => {
            let pk = pooling
                .k
                .ok_or_else(|| TrainError::Config("k-ary pooling requires k".into()))?;
            if pk != k {
                return Err(TrainError::Config(format!(
                    "pooling k = {pk} but the model reads {k} elements"
                )));
            }
            let (inputs, tuples) = if pooling.sorts_inputs() {
                let tuples =
                    perm::enumerate_k_combinations(n.max(k), k, perm::DEFAULT_TERM_CAP).map_err(PoolError::from)?;
                (sort_inputs(xs, pooling.canonical_key), tuples)
            } else {
                let tuples = perm::enumerate_k_permutations(n.max(k), k).map_err(PoolError::from)?;
                (xs.to_vec(), tuples)
            };
            let tuples: Vec<Vec<usize>> = tuples.iter().map(|t| t.indices().to_vec()).collect();
            model.mlp_tuple_mean(g, ids, &inputs, &tuples)?
        }
        Strategy::Canonical => {
            let sorted = sort_inputs(xs, pooling.canonical_key);
            model.mlp_tuple_mean(g, ids, &sorted, &[(0..k).collect()])?
        }
        Strategy::Exact | Strategy::Sampled => unreachable!("handled above or below"),
    };
    Ok(pooling::composed_forward(g, pooled, &rho)?)
}

/// [`pooled_forward`] through the generic pooling operators only.
pub fn pooled_forward_generic(
    g: &mut Graph,
    model: &Model,
    ids: &[NodeId],
    pooling: &PoolingSpec,
    xs: &[Vec<usize>],
) -> Result<NodeId> {
    let (f, rho) = model.bind(ids);
    let pooled = match pooling.strategy {
        Strategy::Exact => {
            let h = model.embed_positions(g, xs)?;
            pooling::janossy_exact(g, &f, &h)?
        }
        Strategy::Kary => {
            let k = pooling
                .k
                .ok_or_else(|| TrainError::Config("k-ary pooling requires k".into()))?;
            if pooling.sorts_inputs() {
                let sorted = sort_inputs(xs, pooling.canonical_key);
                let h = model.embed_positions(g, &sorted)?;
                pooling::janossy_kary_combinations(g, &f, &h, k)?
            } else {
                let h = model.embed_positions(g, xs)?;
                pooling::janossy_kary(g, &f, &h, k)?
            }
        }
        Strategy::Canonical => {
            let sorted = sort_inputs(xs, pooling.canonical_key);
            let h = model.embed_positions(g, &sorted)?;
            f.eval(g, h.len(), &h)?
        }
        Strategy::Sampled => {
            return Err(TrainError::Config(
                "sampled pooling has no deterministic forward; use sampled_forward".into(),
            ))
        }
    };
    Ok(pooling::composed_forward(g, pooled, &rho)?)
}

/// `rho(f(h_{s_i}))` with one given ordering per example, `[B, out]`.
pub fn permuted_forward(
    g: &mut Graph,
    model: &Model,
    ids: &[NodeId],
    xs: &[Vec<usize>],
    perms: &[Permutation],
) -> Result<NodeId> {
    let (f, rho) = model.bind(ids);
    let permuted: Vec<Vec<usize>> = xs.iter().zip(perms).map(|(x, p)| p.apply(x)).collect();
    let inner = if model.spec.f_arch.is_recurrent() {
        let h = model.embed_positions(g, &permuted)?;
        f.eval(g, h.len(), &h)?
    } else {
        let k = model.spec.k.unwrap_or(1);
        model.mlp_tuple_mean(g, ids, &permuted, &[(0..k).collect()])?
    };
    Ok(rho.forward(g, inner)?)
}

pub fn sample_orders<R: Rng + ?Sized>(xs: &[Vec<usize>], rng: &mut R) -> Vec<Permutation> {
    xs.iter().map(|x| perm::sample_permutation(x.len(), rng)).collect()
}

/// Mean of `m` permuted forwards with fresh per-example orderings.
pub fn sampled_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    ids: &[NodeId],
    xs: &[Vec<usize>],
    m: usize,
    rng: &mut R,
) -> Result<NodeId> {
    if m == 0 {
        return Err(PoolError::ZeroSamples.into());
    }
    let mut acc = None;
    for _ in 0..m {
        let perms = sample_orders(xs, rng);
        let y = permuted_forward(g, model, ids, xs, &perms)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / m as f64)?)
}

/// Squared L2 distance between `f(h_s)` and `f(h_s')` for two independent
/// orderings per example, averaged over the batch. `s'` is redrawn once if
/// it equals `s`; single-element sequences give 0.
pub fn variance_penalty<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    ids: &[NodeId],
    xs: &[Vec<usize>],
    rng: &mut R,
) -> Result<NodeId> {
    let n = xs.first().map_or(0, Vec::len);
    if n <= 1 || xs.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let (f, _) = model.bind(ids);
    let first = sample_orders(xs, rng);
    let second: Vec<Permutation> = first
        .iter()
        .map(|s| {
            let t = perm::sample_permutation(n, rng);
            if &t == s {
                perm::sample_permutation(n, rng)
            } else {
                t
            }
        })
        .collect();
    let mut outputs = [None, None];
    for (slot, perms) in outputs.iter_mut().zip([&first, &second]) {
        let permuted: Vec<Vec<usize>> = xs.iter().zip(perms).map(|(x, p)| p.apply(x)).collect();
        let h = model.embed_positions(g, &permuted)?;
        *slot = Some(f.eval(g, n, &h)?);
    }
    let diff = g.sub(outputs[0].unwrap(), outputs[1].unwrap())?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / xs.len() as f64)?)
}

/// Single-sequence penalty value.
pub fn variance_regularizer<R: Rng + ?Sized>(model: &Model, x: &[usize], rng: &mut R) -> Result<f64> {
    let mut g = Graph::new();
    let ids = model.params.bind_frozen(&mut g);
    let p = variance_penalty(&mut g, model, &ids, &[x.to_vec()], rng)?;
    Ok(g.value(p).item().unwrap_or(0.0))
}

/// One minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [Vec<usize>],
    pub targets: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [Vec<usize>], targets: &'a [f64]) -> Self {
        Batch { inputs, targets }
    }
}

/// Loss value and parameter gradient of one batch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub grads: Gradients,
}

fn finish(g: &mut Graph, model: &Model, ids: &[NodeId], total: NodeId, data_loss: NodeId) -> Result<StepOutcome> {
    g.backward(total)?;
    Ok(StepOutcome {
        loss: g.value(data_loss).item().unwrap_or(f64::NAN),
        grads: Gradients::from_graph(g, ids, &model.params),
    })
}

/// Permutation-sampled gradient `Z_t` for given orderings: the batch mean
/// of `grad L(y_i, rho(f(h_{s_i})))`.
pub fn pi_sgd_gradient_with(
    model: &Model,
    batch: Batch<'_>,
    perms: &[Permutation],
    loss_kind: LossKind,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let ids = model.params.bind(&mut g);
    let pred = permuted_forward(&mut g, model, &ids, batch.inputs, perms)?;
    let l = loss_node(&mut g, loss_kind, pred, batch.targets)?;
    finish(&mut g, model, &ids, l, l)
}

/// `Z_t` with `m` fresh orderings per example (`m = 1` is the plain
/// estimator) plus the optional output-variance penalty.
pub fn pi_sgd_gradient<R: Rng + ?Sized>(
    model: &Model,
    batch: Batch<'_>,
    m: usize,
    loss_kind: LossKind,
    variance_reg_weight: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    if m == 0 {
        return Err(PoolError::ZeroSamples.into());
    }
    let mut g = Graph::new();
    let ids = model.params.bind(&mut g);
    let mut acc = None;
    for _ in 0..m {
        let perms = sample_orders(batch.inputs, rng);
        let pred = permuted_forward(&mut g, model, &ids, batch.inputs, &perms)?;
        let l = loss_node(&mut g, loss_kind, pred, batch.targets)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let data_loss = if m == 1 {
        acc.unwrap()
    } else {
        g.scale(acc.unwrap(), 1.0 / m as f64)?
    };
    let total = if variance_reg_weight > 0.0 {
        let p = variance_penalty(&mut g, model, &ids, batch.inputs, rng)?;
        let p = g.scale(p, variance_reg_weight)?;
        g.add(data_loss, p)?
    } else {
        data_loss
    };
    finish(&mut g, model, &ids, total, data_loss)
}

/// Full gradient through every pooling term.
pub fn exact_gradient(
    model: &Model,
    pooling: &PoolingSpec,
    batch: Batch<'_>,
    loss_kind: LossKind,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let ids = model.params.bind(&mut g);
    let pred = pooled_forward(&mut g, model, &ids, pooling, batch.inputs)?;
    let l = loss_node(&mut g, loss_kind, pred, batch.targets)?;
    finish(&mut g, model, &ids, l, l)
}

fn sgd_update(params: &mut ParamSet, grads: &Gradients, lr: f64) {
    for (t, g) in params.tensors_mut().zip(&grads.0) {
        t.data_mut().iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
    }
}

/// One permutation-sampled SGD update `theta <- theta - lr * Z_t`.
/// Returns the batch loss before the update.
pub fn pi_sgd_step<R: Rng + ?Sized>(model: &mut Model, batch: Batch<'_>, rng: &mut R, lr: f64) -> Result<f64> {
    let out = pi_sgd_gradient(model, batch, 1, LossKind::L1, 0.0, rng)?;
    sgd_update(&mut model.params, &out.grads, lr);
    Ok(out.loss)
}

/// One full-gradient SGD update for k-ary (or exact) pooling.
pub fn exact_kary_step(model: &mut Model, pooling: &PoolingSpec, batch: Batch<'_>, lr: f64) -> Result<f64> {
    if let (Strategy::Kary, Some(k)) = (pooling.strategy, pooling.k) {
        let n = batch.inputs.first().map_or(0, Vec::len).max(k);
        let terms = if pooling.sorts_inputs() {
            perm::combination_count(n, k)
        } else {
            perm::k_permutation_count(n, k)
        };
        if terms.is_none_or(|t| t > perm::DEFAULT_TERM_CAP) {
            return Err(TrainError::Config(format!(
                "{n}-element inputs with k = {k} exceed the pooling term cap; \
                 train with sampled pooling over the k-ary f instead"
            )));
        }
    }
    let out = exact_gradient(model, pooling, batch, LossKind::L1)?;
    sgd_update(&mut model.params, &out.grads, lr);
    Ok(out.loss)
}

/// Moment-corrected adaptive steps.
#[derive(Debug, Clone)]
pub struct Adam {
    schedule: SgdSchedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self::with_schedule(
            params,
            SgdSchedule {
                base_lr: lr,
                decay: 0.0,
            },
        )
    }

    /// Base step size `schedule.rate(t)` at step `t`.
    pub fn with_schedule(params: &ParamSet, schedule: SgdSchedule) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Adam {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        let lr = self.schedule.rate(self.t);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = lr * c2.sqrt() / c1;
        for (((t, g), m), v) in params.tensors_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &d), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                *w -= step * *mi / (vi.sqrt() + self.eps * c2.sqrt());
            }
        }
    }
}

/// `eta_t = base / (1 + t * decay)`: positive, vanishing, with divergent sum
/// and convergent sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSchedule {
    pub base_lr: f64,
    pub decay: f64,
}

impl SgdSchedule {
    pub fn rate(&self, t: u64) -> f64 {
        self.base_lr / (1.0 + t as f64 * self.decay)
    }
}

enum Optimizer {
    Sgd { schedule: SgdSchedule, t: u64 },
    Adam(Adam),
}

impl Optimizer {
    fn new(config: &TrainConfig, params: &ParamSet, lr: f64) -> Self {
        match config.optimizer {
            OptimizerKind::SgdSchedule => Optimizer::Sgd {
                schedule: SgdSchedule {
                    base_lr: lr,
                    decay: config.decay(),
                },
                t: 0,
            },
            OptimizerKind::AdamStyle => Optimizer::Adam(Adam::with_schedule(
                params,
                SgdSchedule {
                    base_lr: lr,
                    decay: config.decay(),
                },
            )),
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        match self {
            Optimizer::Sgd { schedule, t } => {
                sgd_update(params, grads, schedule.rate(*t));
                *t += 1;
            }
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

const PREDICT_CHUNK: usize = 512;

/// Predictions in target units. Sampled models average `m` orderings of
/// `rho . f` per example; the other strategies ignore `m` and `rng`.
pub fn predict_averaged<R: Rng + ?Sized>(
    model: &Model,
    pooling: &PoolingSpec,
    xs: &[Vec<usize>],
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(PREDICT_CHUNK) {
        let mut g = Graph::new();
        let ids = model.params.bind_frozen(&mut g);
        let y = match pooling.strategy {
            Strategy::Sampled => sampled_forward(&mut g, model, &ids, chunk, m, rng)?,
            _ => pooled_forward(&mut g, model, &ids, pooling, chunk)?,
        };
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

/// Mean of `rho . f` over all `n!` orderings of each example.
pub fn predict_exhaustive(model: &Model, xs: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = xs.first().map_or(0, Vec::len);
    let perms = perm::enumerate_permutations(n).map_err(PoolError::from)?;
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(PREDICT_CHUNK) {
        let mut g = Graph::new();
        let ids = model.params.bind_frozen(&mut g);
        let mut acc = None;
        for p in &perms {
            let same: Vec<Permutation> = vec![p.clone(); chunk.len()];
            let y = permuted_forward(&mut g, model, &ids, chunk, &same)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        let y = g.scale(acc.unwrap(), 1.0 / perms.len() as f64)?;
        out.extend_from_slice(g.value(y).data());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_mae: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// One ordering per example (or the deterministic pooled forward).
    pub single: Metrics,
    /// `infer_samples` orderings averaged per example.
    pub averaged: Metrics,
    pub infer_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: crate::nets::ModelSpec,
    pub pooling: PoolingSpec,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub selected_lr: f64,
    /// `(lr, validation score)` per grid point when a search ran.
    pub validation: Vec<(f64, f64)>,
    pub epochs: Vec<EpochRecord>,
    pub final_test: FinalMetrics,
    pub param_checksum: String,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// The report with every wall-clock field zeroed, for comparing reruns.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        for e in &mut r.epochs {
            e.wall_seconds = 0.0;
        }
        r
    }

    /// Per-epoch CSV log.
    pub fn metrics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,test_accuracy,test_rmse,test_mae,wall_seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                e.epoch,
                e.train_loss,
                opt(e.test_accuracy),
                opt(e.test_rmse),
                opt(e.test_mae),
                e.wall_seconds
            ));
        }
        s
    }
}

/// Everything a single training run needs.
pub struct TrainSetup<'a> {
    pub model: Model,
    pub pooling: &'a PoolingSpec,
    pub config: &'a TrainConfig,
    pub train: &'a Split,
    pub test: &'a Split,
    /// Decides the direction of the validation comparison.
    pub metric: MetricKind,
}

fn evaluate(model: &Model, pooling: &PoolingSpec, split: &Split, m: usize, seed: u64) -> Result<Metrics> {
    let mut rng = seed::rng(seed);
    let preds = predict_averaged(model, pooling, &split.inputs, m, &mut rng)?;
    Ok(Metrics::compute(&preds, &split.targets)?)
}

/// Trains at one learning rate; returns the trained model and per-epoch log.
pub fn train_at_rate(
    mut model: Model,
    pooling: &PoolingSpec,
    config: &TrainConfig,
    lr: f64,
    train: &Split,
    test: &Split,
) -> Result<(Model, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    if config.standardize_targets {
        model.output = crate::nets::OutputScale::fit(&train.targets);
    }
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, seed::stream::SHUFFLE, 0));
    let mut perm_rng = seed::rng(seed::derive(pooling.seed, seed::stream::PERM, 0));
    let mut optimizer = Optimizer::new(config, &model.params, lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        // Fisher-Yates over example indices
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let xs: Vec<Vec<usize>> = idx.iter().map(|&i| train.inputs[i].clone()).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| train.targets[i]).collect();
            let batch = Batch::new(&xs, &ys);
            let out = match pooling.strategy {
                Strategy::Sampled => pi_sgd_gradient(
                    &model,
                    batch,
                    pooling.train_samples,
                    config.loss,
                    config.variance_reg_weight,
                    &mut perm_rng,
                )?,
                _ => exact_gradient(&model, pooling, batch, config.loss)?,
            };
            loss_sum += out.loss * idx.len() as f64;
            optimizer.step(&mut model.params, &out.grads);
        }
        let evaluate_now = epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0);
        let test_metrics = if evaluate_now && !test.is_empty() {
            Some(evaluate(
                &model,
                pooling,
                test,
                1,
                seed::derive(pooling.seed, seed::stream::EVAL, epoch as u64),
            )?)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy: test_metrics.map(|m| m.accuracy),
            test_rmse: test_metrics.map(|m| m.rmse),
            test_mae: test_metrics.map(|m| m.mae),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((model, records))
}

fn better(metric: MetricKind, candidate: f64, incumbent: f64) -> bool {
    match metric {
        MetricKind::Accuracy => candidate > incumbent,
        MetricKind::Rmse | MetricKind::Mae => candidate < incumbent,
    }
}

/// Full run: optional learning-rate search on a validation split carved
/// from the end of the training data, then final test metrics with one and
/// with `infer_samples` orderings.
pub fn train(setup: TrainSetup<'_>) -> Result<(Model, TrainReport)> {
    let TrainSetup {
        model,
        pooling,
        config,
        train,
        test,
        metric,
    } = setup;
    config.validate().map_err(TrainError::Config)?;
    pooling.validate().map_err(TrainError::Config)?;
    let init_seed = model.seed;
    let start = Instant::now();
    let rates = config.rates();
    let (selected_lr, validation, trained, epochs) = if rates.len() == 1 {
        let (m, e) = train_at_rate(model, pooling, config, rates[0], train, test)?;
        (rates[0], Vec::new(), m, e)
    } else {
        let n_val = ((train.len() as f64) * config.validation_fraction).round() as usize;
        let (fit, val) = train.split_at(train.len() - n_val.max(1).min(train.len() - 1));
        let mut best: Option<(f64, f64, Model, Vec<EpochRecord>)> = None;
        let mut scores = Vec::new();
        for &lr in &rates {
            let (m, e) = train_at_rate(model.clone(), pooling, config, lr, &fit, test)?;
            let score = evaluate(
                &m,
                pooling,
                &val,
                pooling.infer_samples,
                seed::derive(pooling.seed, seed::stream::EVAL, u64::MAX),
            )?
            .get(metric);
            scores.push((lr, score));
            let replace = match &best {
                None => true,
                Some((_, s, _, _)) => better(metric, score, *s) || (s.is_nan() && !score.is_nan()),
            };
            if replace {
                best = Some((lr, score, m, e));
            }
        }
        let (lr, _, m, e) = best.expect("non-empty grid");
        (lr, scores, m, e)
    };
    let eval_seed = seed::derive(pooling.seed, seed::stream::EVAL, 0);
    let final_test = if test.is_empty() {
        return Err(TrainError::Config("empty test split".into()));
    } else {
        FinalMetrics {
            single: evaluate(&trained, pooling, test, 1, eval_seed)?,
            averaged: evaluate(&trained, pooling, test, pooling.infer_samples, eval_seed)?,
            infer_samples: pooling.infer_samples,
        }
    };
    let report = TrainReport {
        model: trained.spec.clone(),
        pooling: pooling.clone(),
        train: config.clone(),
        init_seed,
        selected_lr,
        validation,
        epochs,
        final_test,
        param_checksum: trained.params.checksum(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((trained, report))
}

/// Convenience wrapper around [`tasks::metric`] for raw predictions.
pub fn score(kind: MetricKind, predictions: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(tasks::metric(kind, predictions, targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{FArch, ModelSpec, RhoArch};

    fn grads_of(model: &Model, fwd: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> (Vec<f64>, Gradients) {
        let mut g = Graph::new();
        let ids = model.params.bind(&mut g);
        let y = fwd(&mut g, &ids).unwrap();
        let out = g.value(y).data().to_vec();
        let sq = g.square(y).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        (out, Gradients::from_graph(&g, &ids, &model.params))
    }

    #[test]
    fn factored_mlp_matches_generic_pooling() {
        let xs = vec![vec![3, 0, 5, 5], vec![1, 2, 4, 0]];
        let short = vec![vec![2, 1], vec![0, 4]];
        for k in 1..=3 {
            let model = Model::new(ModelSpec::kary(6, k, RhoArch::Mlp100), 4).unwrap();
            let mut specs = vec![
                PoolingSpec::kary(k),
                PoolingSpec {
                    sort_inputs: Some(!PoolingSpec::kary(k).sorts_inputs()),
                    ..PoolingSpec::kary(k)
                },
                PoolingSpec::canonical(CanonicalKey::Descending),
            ];
            specs.push(PoolingSpec::kary(k));
            for spec in &specs {
                for batch in [&xs, &short] {
                    let (a, ga) = grads_of(&model, |g, ids| pooled_forward(g, &model, ids, spec, batch));
                    let (b, gb) = grads_of(&model, |g, ids| pooled_forward_generic(g, &model, ids, spec, batch));
                    for (x, y) in a.iter().zip(&b) {
                        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "k={k} {spec:?}: {x} vs {y}");
                    }
                    assert!(ga.max_abs_diff(&gb) <= 1e-11, "k={k} {spec:?}");
                }
            }
            let perms = [Permutation::new(vec![2, 0, 3, 1]).unwrap(), Permutation::identity(4)];
            let (a, _) = grads_of(&model, |g, ids| permuted_forward(g, &model, ids, &xs, &perms));
            let mut g = Graph::new();
            let ids = model.params.bind_frozen(&mut g);
            let (f, rho) = model.bind(&ids);
            let permuted: Vec<Vec<usize>> = xs.iter().zip(&perms).map(|(x, p)| p.apply(x)).collect();
            let h = model.embed_positions(&mut g, &permuted).unwrap();
            let inner = f.eval(&mut g, 4, &h).unwrap();
            let y = rho.forward(&mut g, inner).unwrap();
            for (x, y) in a.iter().zip(g.value(y).data()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(LossKind::L1, 3.0, 3.0), 0.0);
        assert_eq!(loss(LossKind::Mse, 5.0, 3.0), 4.0);
        assert_eq!(loss(LossKind::L1, 5.0, 3.0), 2.0);
    }

    #[test]
    fn schedule_conditions() {
        let s = SgdSchedule {
            base_lr: 0.5,
            decay: 0.01,
        };
        assert!((0..10_000).all(|t| s.rate(t) > 0.0 && s.rate(t) < 1.0));
        assert!(s.rate(1_000_000) < 1e-3);
        // partial sums: linear-ish growth of sum, bounded sum of squares
        let sum = |n: u64| (0..n).map(|t| s.rate(t)).sum::<f64>();
        let sq = |n: u64| (0..n).map(|t| s.rate(t).powi(2)).sum::<f64>();
        assert!(sum(1_000_000) > 1.5 * sum(10_000));
        assert!(sq(1_000_000) - sq(100_000) < 0.01 * sq(100_000));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig {
            optimizer: OptimizerKind::SgdSchedule,
            ..TrainConfig::default()
        }
        .with_lr(1.5);
        assert!(c.validate().is_err());
        c = c.with_lr(0.1);
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn toy_model(f: FArch) -> Model {
        let spec = match f {
            FArch::Mlp30 => ModelSpec::kary(7, 2, RhoArch::Linear),
            other => ModelSpec::full(7, other, RhoArch::Linear),
        };
        Model::new(spec, 4).unwrap()
    }

    #[test]
    fn variance_penalty_edge_cases() {
        let model = toy_model(FArch::Gru80);
        let mut rng = seed::rng(1);
        assert_eq!(variance_regularizer(&model, &[3], &mut rng).unwrap(), 0.0);
        let p = variance_regularizer(&model, &[1, 2, 3, 4], &mut rng).unwrap();
        assert!(p > 0.0);
        // repeated digits: every ordering is the same sequence
        assert_eq!(variance_regularizer(&model, &[5, 5, 5], &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn unary_kary_step_only_sees_the_mean() {
        // k = 1 with a linear head: permuting the input never changes the step
        let mut a = Model::new(ModelSpec::kary(9, 1, RhoArch::Linear), 2).unwrap();
        let mut b = a.clone();
        let pooling = PoolingSpec::kary(1);
        let ys = [4.0];
        exact_kary_step(&mut a, &pooling, Batch::new(&[vec![1, 5, 8]], &ys), 0.01).unwrap();
        exact_kary_step(&mut b, &pooling, Batch::new(&[vec![8, 1, 5]], &ys), 0.01).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            for (u, v) in x.tensor.data().iter().zip(y.tensor.data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_step_decreases_loss() {
        let mut model = toy_model(FArch::Mlp30);
        let pooling = PoolingSpec::kary(2);
        let xs = vec![vec![1, 4, 6]];
        let ys = [2.5];
        let before = exact_kary_step(&mut model, &pooling, Batch::new(&xs, &ys), 1e-3).unwrap();
        let after = exact_gradient(&model, &pooling, Batch::new(&xs, &ys), LossKind::L1)
            .unwrap()
            .loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn term_cap_redirects_to_sampling() {
        let mut model = Model::new(ModelSpec::kary(12, 7, RhoArch::Linear), 1).unwrap();
        let mut pooling = PoolingSpec::kary(7);
        pooling.sort_inputs = Some(false);
        let xs = vec![(0..12).collect::<Vec<usize>>()];
        let err = exact_kary_step(&mut model, &pooling, Batch::new(&xs, &[1.0]), 0.1).unwrap_err();
        assert!(err.to_string().contains("sampled pooling"), "{err}");
    }

    #[test]
    fn pi_sgd_step_is_seeded() {
        let xs = vec![vec![1, 2, 3], vec![6, 0, 2]];
        let ys = [1.0, 2.0];
        let run = || {
            let mut m = toy_model(FArch::Lstm50);
            let mut rng = seed::rng(99);
            for _ in 0..3 {
                pi_sgd_step(&mut m, Batch::new(&xs, &ys), &mut rng, 0.05).unwrap();
            }
            m.params.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exhaustive_prediction_matches_exact_pooling_of_composed_f() {
        let model = toy_model(FArch::Gru80);
        let xs = vec![vec![0, 3, 5, 6]];
        let via_predict = predict_exhaustive(&model, &xs).unwrap()[0];
        let mut g = Graph::new();
        let ids = model.params.bind_frozen(&mut g);
        let (f, rho) = model.bind(&ids);
        let h = model.embed_positions(&mut g, &xs).unwrap();
        let composed = pooling::Composed { f, rho: &rho };
        let out = pooling::janossy_exact(&mut g, &composed, &h).unwrap();
        assert!((g.value(out).data()[0] - via_predict).abs() < 1e-12);
    }
}
