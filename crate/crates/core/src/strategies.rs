//! Training strategies (finetune, ER, EWC, LwF), the explanation-consistency
//! loss, and the task-sequence learner that composes them.

use std::rc::Rc;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::memory::{reference_saliencies, BufferEntry, DualBuffer, QuotaPolicy};
use crate::model::{Classifier, ModelState, ModelView};
use crate::par;
use crate::saliency::{explain_batch, Explainable, SaliencyMethod, SaliencySpec};
use crate::scenario::TaskData;
use crate::seed::SeedStreams;
use crate::tensor::Tensor;

/// Samples per Fisher work item.
const FISHER_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    Er,
    Ewc,
    Lwf,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Er => "er",
            Strategy::Ewc => "ewc",
            Strategy::Lwf => "lwf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

fn d_rrr_lambda() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay() -> f64 {
    0.2
}
fn d_ewc_lambda() -> f64 {
    100.0
}
fn d_fisher() -> usize {
    256
}
fn d_tau() -> f64 {
    2.0
}
fn d_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub rrr_enabled: bool,
    #[serde(default = "d_rrr_lambda")]
    pub rrr_lambda: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Defaults to `batch_size`.
    #[serde(default)]
    pub replay_batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// SGD only.
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Epoch indices at which the rate is multiplied by `lr_decay`.
    /// Defaults to 2/7, 4/7 and 6/7 of `epochs`.
    #[serde(default)]
    pub lr_milestones: Option<Vec<usize>>,
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_ewc_lambda")]
    pub ewc_lambda: f64,
    #[serde(default = "d_fisher")]
    pub fisher_samples: usize,
    #[serde(default = "d_tau")]
    pub lwf_temperature: f64,
    #[serde(default = "d_one")]
    pub lwf_lambda: f64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        TrainConfig {
            strategy,
            rrr_enabled: false,
            rrr_lambda: d_rrr_lambda(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            replay_batch_size: None,
            optimizer: OptimizerKind::Adam,
            lr: d_lr(),
            momentum: d_momentum(),
            lr_milestones: None,
            lr_decay: d_decay(),
            ewc_lambda: d_ewc_lambda(),
            fisher_samples: d_fisher(),
            lwf_temperature: d_tau(),
            lwf_lambda: d_one(),
        }
    }

    /// Whether the explanation term contributes at all.
    pub fn rrr_active(&self) -> bool {
        self.rrr_enabled && self.rrr_lambda > 0.0
    }

    pub fn replay_batch(&self) -> usize {
        self.replay_batch_size.unwrap_or(self.batch_size)
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_milestones {
            Some(m) => m.clone(),
            None => {
                let mut m: Vec<usize> = [2, 4, 6]
                    .iter()
                    .map(|&q| self.epochs * q / 7)
                    .filter(|&e| e > 0)
                    .collect();
                m.dedup();
                m
            }
        }
    }

    /// Learning rate during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Checks values and their consistency with the buffer capacity.
    pub fn validate(&self, buffer_capacity: usize) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.rrr_lambda) {
            return Err(Error::config("train.rrr_lambda", "must be a finite value >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.replay_batch_size == Some(0) {
            return Err(Error::config("train.replay_batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::config("train.lr_decay", "must be positive"));
        }
        if !finite_nonneg(self.ewc_lambda) {
            return Err(Error::config("train.ewc_lambda", "must be a finite value >= 0"));
        }
        if !finite_nonneg(self.lwf_lambda) {
            return Err(Error::config("train.lwf_lambda", "must be a finite value >= 0"));
        }
        if !(self.lwf_temperature.is_finite() && self.lwf_temperature > 0.0) {
            return Err(Error::config("train.lwf_temperature", "must be positive"));
        }
        if self.strategy == Strategy::Ewc && self.fisher_samples == 0 {
            return Err(Error::config("train.fisher_samples", "must be at least 1"));
        }
        if buffer_capacity == 0 {
            if self.rrr_enabled {
                return Err(Error::config(
                    "train.rrr_enabled",
                    "RRR requires a buffer (buffer_capacity is 0)",
                ));
            }
            if self.strategy == Strategy::Er {
                return Err(Error::config(
                    "train.strategy",
                    "experience replay requires a buffer (buffer_capacity is 0)",
                ));
            }
        }
        Ok(())
    }
}

/// Telemetry for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub l_task: f64,
    pub l_replay: f64,
    pub l_rrr: f64,
    pub l_reg: f64,
    pub grad_norm: f64,
}

/// Parameters and diagonal Fisher information after one completed task.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcAnchor {
    pub theta: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegularizerState {
    pub ewc_anchors: Vec<EwcAnchor>,
    /// Model at the end of the previous task.
    pub lwf_teacher: Option<ModelState>,
}

/// Mean cross-entropy of `[N, C]` logits against head-row targets.
pub fn task_loss(logits: &Var, targets: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} targets",
            s,
            targets.len()
        )));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidArgument(format!(
            "label row {t} outside a {c}-way head"
        )));
    }
    let lp = ag::log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
    let picked = ag::gather(&lp, Rc::new(idx), vec![n])?;
    Ok(ag::scale(&ag::sum(&picked)?, -1.0 / n as f64))
}

/// Replay samples in the layout the losses need.
pub struct ReplayBatch {
    pub images: Tensor,
    /// Head rows of the labels.
    pub rows: Vec<usize>,
    /// `[N, P]` stored reference maps.
    pub references: Tensor,
    pub noise_seeds: Vec<u64>,
    pub method: SaliencyMethod,
}

impl ReplayBatch {
    pub fn from_entries(entries: &[&BufferEntry], state: &ModelState) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyBuffer)?;
        let method = first.saliency.method;
        let p = first.saliency.values.len();
        let mut refs = Vec::with_capacity(entries.len() * p);
        let mut rows = Vec::with_capacity(entries.len());
        for e in entries {
            if e.saliency.method != method {
                return Err(Error::MethodMismatch {
                    stored: e.saliency.method.to_string(),
                    requested: method.to_string(),
                });
            }
            if e.saliency.values.len() != p {
                return Err(Error::Shape("reference maps differ in resolution".into()));
            }
            refs.extend_from_slice(&e.saliency.values);
            rows.push(state.class_index(e.label).ok_or_else(|| {
                Error::InvalidArgument(format!("class {} has no head row", e.label))
            })?);
        }
        let images: Vec<&Tensor> = entries.iter().map(|e| &e.image).collect();
        Ok(ReplayBatch {
            images: Tensor::stack(&images)?,
            rows,
            references: Tensor::new(vec![entries.len(), p], refs)?,
            noise_seeds: entries.iter().map(|e| e.noise_seed).collect(),
            method,
        })
    }
}

/// L1 drift between fresh and stored saliencies: per-map sum of absolute
/// differences, averaged over the batch. Differentiable in the model
/// parameters. Also returns the clean-input logits when the method computed
/// them, so callers can reuse the forward pass.
pub fn rrr_loss(
    model: &dyn Explainable,
    batch: &ReplayBatch,
    xai: &SaliencySpec,
) -> Result<(Var, Option<Var>)> {
    if batch.method != xai.method {
        return Err(Error::MethodMismatch {
            stored: batch.method.to_string(),
            requested: xai.method.to_string(),
        });
    }
    let fresh = explain_batch(model, &batch.images, &batch.rows, xai, &batch.noise_seeds, true)?;
    if fresh.maps.shape() != batch.references.shape() {
        return Err(Error::Shape(format!(
            "fresh maps {:?} vs references {:?}",
            fresh.maps.shape(),
            batch.references.shape()
        )));
    }
    let n = batch.rows.len();
    let diff = ag::sub(&fresh.maps, &Var::constant(batch.references.clone()))?;
    let loss = ag::scale(&ag::sum(&ag::abs(&diff))?, 1.0 / n as f64);
    Ok((loss, fresh.logits))
}

/// `theta` restricted to the leading part covered by `anchor`. Head tensors
/// grow by appending rows, so an anchor taken before an expansion covers a
/// prefix of the current tensor.
fn anchored_prefix(theta: &Var, anchor: &Tensor) -> Result<Var> {
    let (s, a) = (theta.shape(), anchor.shape());
    if s == a {
        return Ok(theta.clone());
    }
    if s.len() == a.len() && !s.is_empty() && s[1..] == a[1..] && a[0] <= s[0] {
        return ag::gather(theta, Rc::new((0..anchor.len()).collect()), a.to_vec());
    }
    Err(Error::Shape(format!("parameter {:?} vs anchor {:?}", s, a)))
}

/// `sum_anchors (lambda / 2) sum_i F_i (theta_i - theta*_i)^2`.
pub fn ewc_penalty(params: &[Var], anchors: &[EwcAnchor], ewc_lambda: f64) -> Result<Var> {
    let mut total = Var::constant(Tensor::scalar(0.0));
    for a in anchors {
        if a.theta.len() != params.len() || a.fisher.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters vs an anchor of {}",
                params.len(),
                a.theta.len()
            )));
        }
        for ((p, star), f) in params.iter().zip(&a.theta).zip(&a.fisher) {
            if star.shape() != f.shape() {
                return Err(Error::Shape("anchor and Fisher shapes differ".into()));
            }
            let d = ag::sub(&anchored_prefix(p, star)?, &Var::constant(star.clone()))?;
            let sq = ag::mul_const(&ag::mul(&d, &d)?, Rc::new(f.clone()))?;
            total = ag::add(&total, &ag::sum(&sq)?)?;
        }
    }
    Ok(ag::scale(&total, ewc_lambda / 2.0))
}

/// Mean of squared per-sample gradients, reduced in sample order.
pub fn mean_squared_gradients(per_sample: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let mut acc: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for g in per_sample {
        for (a, t) in acc.iter_mut().zip(g) {
            for (x, v) in a.data_mut().iter_mut().zip(t.data()) {
                *x += v * v;
            }
        }
    }
    let n = per_sample.len() as f64;
    Ok(acc.into_iter().map(|t| t.map(|v| v / n)).collect())
}

/// Gradient of `log p(label | image)` w.r.t. every parameter.
pub fn log_likelihood_gradient(
    classifier: &Classifier,
    state: &ModelState,
    image: &Tensor,
    row: usize,
) -> Result<Vec<Tensor>> {
    let view = ModelView::trainable(classifier, state);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = Var::constant(image.clone().reshape(shape)?);
    let (logits, _) = view.scores(&x, None)?;
    let nll = task_loss(&logits, &[row])?;
    let refs: Vec<&Var> = view.params.iter().collect();
    Ok(ag::grad_values(&nll, &refs)?
        .into_iter()
        .map(|g| g.map(|v| -v))
        .collect())
}

/// Diagonal empirical Fisher on ground-truth labels over the first
/// `min(n_samples, |train|)` training samples.
pub fn fisher_diag(
    classifier: &Classifier,
    state: &ModelState,
    task: &TaskData,
    n_samples: usize,
) -> Result<Vec<Tensor>> {
    let n = n_samples.min(task.train.len());
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "task {} has no samples for the Fisher estimate",
            task.task_id
        )));
    }
    let samples = &task.train[..n];
    let chunks = n.div_ceil(FISHER_CHUNK);
    let partials = par::map_range(chunks, |ci| -> Result<Vec<Tensor>> {
        let lo = ci * FISHER_CHUNK;
        let hi = (lo + FISHER_CHUNK).min(n);
        let mut acc: Option<Vec<Tensor>> = None;
        for s in &samples[lo..hi] {
            let row = state.class_index(s.label).ok_or_else(|| {
                Error::InvalidArgument(format!("class {} has no head row", s.label))
            })?;
            let g = log_likelihood_gradient(classifier, state, &s.image, row)?;
            let acc = acc.get_or_insert_with(|| g.iter().map(|t| Tensor::zeros(t.shape())).collect());
            for (a, t) in acc.iter_mut().zip(&g) {
                for (x, v) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += v * v;
                }
            }
        }
        Ok(acc.expect("non-empty chunk"))
    });
    let mut total: Option<Vec<Tensor>> = None;
    for p in partials {
        let p = p?;
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(&p) {
                    for (x, v) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += v;
                    }
                }
            }
        }
    }
    Ok(total
        .expect("at least one chunk")
        .into_iter()
        .map(|t| t.map(|v| v / n as f64))
        .collect())
}

/// Distillation: `tau^2` times the cross-entropy between the softened old
/// distribution and the softened new distribution, averaged over the batch.
pub fn lwf_distill(new_logits_old_classes: &Var, old_logits: &Tensor, tau: f64) -> Result<Var> {
    if new_logits_old_classes.shape() != old_logits.shape() || old_logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "new logits {:?} cover different classes than old logits {:?}",
            new_logits_old_classes.shape(),
            old_logits.shape()
        )));
    }
    let n = old_logits.shape()[0];
    let c = old_logits.shape()[1];
    let mut target = Vec::with_capacity(n * c);
    for row in old_logits.data().chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        target.extend(e.into_iter().map(|v| v / z));
    }
    let lp = ag::log_softmax(&ag::scale(new_logits_old_classes, 1.0 / tau))?;
    let weighted = ag::mul_const(&lp, Rc::new(Tensor::new(vec![n, c], target)?))?;
    Ok(ag::scale(&ag::sum(&weighted)?, -tau * tau / n as f64))
}

/// First-order optimizer over a model's parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(cfg: &TrainConfig, state: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor], lr: f64) {
        self.steps += 1;
        for (i, (p, g)) in state.params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gi), mi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m) {
                        *mi = self.momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[i];
                    let c1 = 1.0 - Self::BETA1.powi(self.steps);
                    let c2 = 1.0 - Self::BETA2.powi(self.steps);
                    for (((w, &gi), mi), vi) in
                        p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v)
                    {
                        *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
                        *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
        state.version += 1;
    }
}

/// Random streams consumed by training.
pub struct TrainRngs<'a> {
    /// Minibatch order.
    pub training: &'a mut ChaCha8Rng,
    /// Replay draws; only consumed when a replay batch is needed.
    pub replay: &'a mut ChaCha8Rng,
}

/// Trains on one task. The head must already cover the task's classes.
pub fn train_task(
    classifier: &Classifier,
    state: &ModelState,
    task: &TaskData,
    buffer: &DualBuffer,
    reg: &RegularizerState,
    cfg: &TrainConfig,
    xai: &SaliencySpec,
    rngs: TrainRngs<'_>,
) -> Result<(ModelState, Vec<TrainStepReport>)> {
    classifier.check_state(state)?;
    let k = task.task_id;
    if cfg.rrr_enabled && k > 1 && buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if task.train.is_empty() {
        return Err(Error::InvalidArgument(format!("task {k} has no training data")));
    }
    let rows = task
        .train
        .iter()
        .map(|s| {
            state
                .class_index(s.label)
                .ok_or_else(|| Error::InvalidArgument(format!("class {} has no head row", s.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let replay = (cfg.strategy == Strategy::Er || cfg.rrr_active()) && !buffer.is_empty();
    let ewc = cfg.strategy == Strategy::Ewc && !reg.ewc_anchors.is_empty();
    let teacher = match (&reg.lwf_teacher, cfg.strategy) {
        (Some(t), Strategy::Lwf) if t.num_classes() > 0 => Some(t),
        _ => None,
    };

    let mut state = state.clone();
    let mut opt = Optimizer::new(cfg, &state);
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rngs.training);
        for idx in order.chunks(cfg.batch_size) {
            let view = ModelView::trainable(classifier, &state);
            let images: Vec<&Tensor> = idx.iter().map(|&i| &task.train[i].image).collect();
            let x = Tensor::stack(&images)?;
            let targets: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
            let xv = Var::constant(x.clone());
            let (logits, _) = view.scores(&xv, None)?;
            let l_task = task_loss(&logits, &targets)?;
            let mut total = l_task.clone();
            let (mut l_replay, mut l_rrr, mut l_reg) = (0.0, 0.0, 0.0);

            if replay {
                let entries = buffer.sample_batch(cfg.replay_batch(), rngs.replay)?;
                let batch = ReplayBatch::from_entries(&entries, &state)?;
                let mut replay_logits = None;
                if cfg.rrr_active() {
                    let (l, logits) = rrr_loss(&view, &batch, xai)?;
                    l_rrr = l.value().item();
                    total = ag::add(&total, &ag::scale(&l, cfg.rrr_lambda))?;
                    replay_logits = logits;
                }
                if cfg.strategy == Strategy::Er {
                    let logits = match replay_logits {
                        Some(l) => l,
                        None => view.scores(&Var::constant(batch.images.clone()), None)?.0,
                    };
                    let l = task_loss(&logits, &batch.rows)?;
                    l_replay = l.value().item();
                    total = ag::add(&total, &l)?;
                }
            }
            if ewc {
                let p = ewc_penalty(&view.params, &reg.ewc_anchors, cfg.ewc_lambda)?;
                l_reg += p.value().item();
                total = ag::add(&total, &p)?;
            }
            if let Some(t) = teacher {
                let old = {
                    let _ng = ag::no_grad();
                    let tv = ModelView::constant(classifier, t);
                    tv.scores(&xv, None)?.0.value().clone()
                };
                let (n, c_new) = (targets.len(), logits.shape()[1]);
                let c_old = t.num_classes();
                let cols: Vec<usize> = (0..n * c_old)
                    .map(|j| (j / c_old) * c_new + j % c_old)
                    .collect();
                let new_old = ag::gather(&logits, Rc::new(cols), vec![n, c_old])?;
                let d = ag::scale(&lwf_distill(&new_old, &old, cfg.lwf_temperature)?, cfg.lwf_lambda);
                l_reg += d.value().item();
                total = ag::add(&total, &d)?;
            }

            let refs: Vec<&Var> = view.params.iter().collect();
            let grads = ag::grad_values(&total, &refs)?;
            let grad_norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !grad_norm.is_finite() || !total.value().item().is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite loss or gradient in task {k}, epoch {epoch}"
                )));
            }
            opt.step(&mut state, &grads, lr);
            let report = TrainStepReport {
                task: k,
                epoch,
                step: state.version,
                lr,
                l_task: l_task.value().item(),
                l_replay,
                l_rrr,
                l_reg,
                grad_norm,
            };
            debug!("{:?}", report);
            reports.push(report);
        }
    }
    Ok((state, reports))
}

/// Mean per-entry L1 drift between the current model's saliencies and the
/// stored references. Not differentiable; used for evaluation.
pub fn buffer_rrr_loss(
    classifier: &Classifier,
    state: &ModelState,
    buffer: &DualBuffer,
    xai: &SaliencySpec,
) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if let Some(m) = buffer.method() {
        if m != xai.method {
            return Err(Error::MethodMismatch {
                stored: m.to_string(),
                requested: xai.method.to_string(),
            });
        }
    }
    let images: Vec<&Tensor> = buffer.entries.iter().map(|e| &e.image).collect();
    let labels: Vec<usize> = buffer.entries.iter().map(|e| e.label).collect();
    let seeds: Vec<u64> = buffer.entries.iter().map(|e| e.noise_seed).collect();
    let fresh = reference_saliencies(classifier, state, &images, &labels, &seeds, xai, 0)?;
    let total: f64 = fresh
        .iter()
        .zip(&buffer.entries)
        .map(|(f, e)| {
            f.values
                .iter()
                .zip(&e.saliency.values)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / buffer.len() as f64)
}

/// The task-sequence loop: expand head, train, update buffer, snapshot
/// regularizers.
pub struct Learner {
    pub classifier: Classifier,
    pub cfg: TrainConfig,
    pub xai: SaliencySpec,
    pub state: ModelState,
    pub buffer: DualBuffer,
    pub reg: RegularizerState,
    training_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    buffer_rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(
        classifier: Classifier,
        cfg: TrainConfig,
        xai: SaliencySpec,
        buffer_capacity: usize,
        policy: QuotaPolicy,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(buffer_capacity)?;
        xai.validate()?;
        let streams = SeedStreams::new(seed);
        let state = classifier.init(&mut streams.rng("init"));
        Ok(Learner {
            classifier,
            cfg,
            xai,
            state,
            buffer: DualBuffer::new(buffer_capacity, policy),
            reg: RegularizerState::default(),
            training_rng: streams.rng("training"),
            replay_rng: streams.rng("replay"),
            buffer_rng: streams.rng("buffer"),
        })
    }

    /// Trains through `task` and performs the post-task updates.
    pub fn learn_task(&mut self, task: &TaskData) -> Result<Vec<TrainStepReport>> {
        let expanded = self.classifier.expand_head(&self.state, &task.class_ids)?;
        let (state, reports) = train_task(
            &self.classifier,
            &expanded,
            task,
            &self.buffer,
            &self.reg,
            &self.cfg,
            &self.xai,
            TrainRngs {
                training: &mut self.training_rng,
                replay: &mut self.replay_rng,
            },
        )?;
        self.state = state;
        self.buffer.update(
            &self.classifier,
            &self.state,
            task,
            &self.xai,
            &mut self.buffer_rng,
        )?;
        match self.cfg.strategy {
            Strategy::Ewc => {
                let fisher =
                    fisher_diag(&self.classifier, &self.state, task, self.cfg.fisher_samples)?;
                self.reg.ewc_anchors.push(EwcAnchor {
                    theta: self.state.params.iter().map(|p| p.tensor.clone()).collect(),
                    fisher,
                });
            }
            Strategy::Lwf => self.reg.lwf_teacher = Some(self.state.clone()),
            _ => {}
        }
        Ok(reports)
    }

    /// Draws from the replay stream without training, for tests.
    pub fn replay_rng_probe(&mut self) -> u64 {
        self.replay_rng.gen()
    }
}
