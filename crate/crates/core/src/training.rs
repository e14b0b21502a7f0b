//! Sequence losses, the dual Adam optimiser, the training loop, masked-frame
//! pretraining and checkpoint averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frontend::{spec_augment, SpecAugmentConfig};
use crate::nnet::{FreezeMask, Model};
use crate::params::{Gradients, ParamSet};
use crate::tensor::{log_add, Matrix};

// --- losses -------------------------------------------------------------

/// Shortest frame count able to emit `target`: one frame per label plus a
/// separating blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-frame log-probabilities,
/// and its gradient with respect to those log-probabilities (minus the
/// posterior label occupancy).
pub fn ctc_loss(log_probs: &Matrix, target: &[usize], blank: usize) -> Result<(f64, Matrix)> {
    let (t_len, v) = log_probs.shape();
    if blank >= v {
        return Err(Error::invalid(format!("blank {blank} outside vocabulary of {v}")));
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= v || k == blank) {
        return Err(Error::invalid(format!("invalid CTC target label {bad}")));
    }
    if ctc_min_frames(target) > t_len {
        return Err(Error::invalid(format!(
            "target of {} labels needs {} frames, only {t_len} available",
            target.len(),
            ctc_min_frames(target)
        )));
    }
    // Extended label sequence: blank, y1, blank, y2, ..., blank.
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    let neg = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + log_probs.get(t, ext[s]);
        }
    }
    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let step = |s2: usize| beta[t + 1][s2] + log_probs.get(t + 1, ext[s2]);
            let mut b = step(s);
            if s + 1 < s_len {
                b = log_add(b, step(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, step(s + 2));
            }
            beta[t][s] = b;
        }
    }
    let last = t_len - 1;
    let mut log_z = alpha[last][s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[last][s_len - 2]);
    }
    if !log_z.is_finite() {
        return Err(Error::NonFinite("CTC total probability".into()));
    }
    let mut grad = Matrix::zeros(t_len, v);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_z;
            if occ > neg {
                let k = ext[s];
                grad.set(t, k, grad.get(t, k) - occ.exp());
            }
        }
    }
    Ok((-log_z, grad))
}

/// Mean label-smoothed cross-entropy over positions, with target
/// distribution `(1 − ε)·onehot + ε/|V|`, and its gradient with respect to
/// `log_probs`. `ε = 0` is plain NLL.
pub fn nll_loss(log_probs: &Matrix, targets: &[usize], smoothing: f64) -> Result<(f64, Matrix)> {
    let (n, v) = log_probs.shape();
    if n != targets.len() || n == 0 {
        return Err(Error::invalid(format!("{n} prediction rows for {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::invalid(format!("target id {bad} out of range (|V| = {v})")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing must be in [0, 1), got {smoothing}")));
    }
    let uni = smoothing / v as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::filled(n, v, -uni / n as f64);
    for (r, &y) in targets.iter().enumerate() {
        let row = log_probs.row(r);
        loss -= (1.0 - smoothing) * row[y];
        if smoothing > 0.0 {
            loss -= uni * row.iter().sum::<f64>();
        }
        let gy = grad.get(r, y) - (1.0 - smoothing) / n as f64;
        grad.set(r, y, gy);
    }
    Ok((loss / n as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossWeights {
    pub w_st: f64,
    pub w_mt: f64,
    pub w_asr: f64,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        Self {
            w_st: 0.3,
            w_mt: 0.5,
            w_asr: 0.2,
        }
    }
}

impl JointLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_st, self.w_mt, self.w_asr].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("joint loss weights must be non-negative"));
        }
        Ok(())
    }
}

pub fn joint_loss(l_st: f64, l_mt: f64, l_asr: f64, w: &JointLossWeights) -> f64 {
    w.w_st * l_st + w.w_mt * l_mt + w.w_asr * l_asr
}

// --- optimiser ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// One Adam instance with its own moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Bias-corrected Adam update of every parameter accepted by `select`
    /// that has a gradient. The learning rate is `config.lr · lr_scale`.
    pub fn step<F>(&mut self, params: &mut ParamSet, grads: &Gradients, lr_scale: f64, select: F)
    where
        F: Fn(&str) -> bool,
    {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let lr = lr * lr_scale;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            if !select(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Two Adam instances: one for the speech encoder (`enc.` parameters), one
/// for everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOptimizer {
    pub encoder: Adam,
    pub rest: Adam,
}

pub const ENCODER_PREFIX: &str = "enc.";

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with(ENCODER_PREFIX)
}

impl DualOptimizer {
    pub fn new(encoder: AdamConfig, rest: AdamConfig) -> Self {
        Self {
            encoder: Adam::new(encoder),
            rest: Adam::new(rest),
        }
    }

    /// Applies one update. Frozen parameters are skipped. A non-finite
    /// gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, freeze: &FreezeMask, lr_scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !freeze.is_frozen(name) && !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.encoder
            .step(params, grads, lr_scale, |n| is_encoder_param(n) && !freeze.is_frozen(n));
        self.rest
            .step(params, grads, lr_scale, |n| !is_encoder_param(n) && !freeze.is_frozen(n));
        Ok(())
    }
}

/// Linear warm-up to 1 at `warmup`, then inverse square-root decay.
pub fn lr_factor(step: u64, warmup: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if warmup == 0 {
        return 1.0;
    }
    let (s, w) = (step as f64, warmup as f64);
    (s / w).min((w / s).sqrt())
}

// --- data and tasks -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Mt,
    St,
    Joint,
}

impl Task {
    /// Whether model selection maximises a decoded score rather than
    /// minimising validation loss.
    pub fn selects_by_score(self) -> bool {
        matches!(self, Task::Mt | Task::St)
    }
}

/// One training item. Which fields are needed depends on the task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Example {
    pub id: String,
    /// Normalised acoustic features.
    pub feats: Option<Matrix>,
    /// Text-encoder input (source tokens).
    pub src_ids: Option<Vec<usize>>,
    /// Decoder target tokens, without bos/eos.
    pub tgt_ids: Option<Vec<usize>>,
    /// CTC labels.
    pub ctc_ids: Option<Vec<usize>>,
}

impl Example {
    fn length(&self) -> usize {
        self.feats
            .as_ref()
            .map(Matrix::rows)
            .or_else(|| self.src_ids.as_ref().map(Vec::len))
            .unwrap_or(0)
    }
}

/// Special ids used by the training graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: usize,
    pub eos: usize,
    pub blank: usize,
}

/// Per-example or averaged loss components. `total` is the quantity optimised.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub st: f64,
    pub mt: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub task: Task,
    pub weights: JointLossWeights,
    pub label_smoothing: f64,
    pub ids: SpecialIds,
}

fn require<'a, T>(field: &'a Option<T>, what: &str, ex: &Example, task: Task) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{task:?} example {:?} lacks {what}", ex.id)))
}

fn decoder_term(g: &mut Graph<'_>, model: &Model, memory: Var, tgt: &[usize], s: &LossSettings) -> Result<(Var, f64)> {
    let mut inputs = Vec::with_capacity(tgt.len() + 1);
    inputs.push(s.ids.bos);
    inputs.extend_from_slice(tgt);
    let mut outputs = tgt.to_vec();
    outputs.push(s.ids.eos);
    let logits = model.decoder_logits(g, memory, &inputs);
    let lp = g.log_softmax_rows(logits);
    let (l, gr) = nll_loss(g.value(lp), &outputs, s.label_smoothing)?;
    Ok((g.loss(lp, l, gr), l))
}

/// CTC term normalised by the label count so it is on the per-token scale
/// of the decoder losses.
fn ctc_term(g: &mut Graph<'_>, model: &Model, enc: Var, labels: &[usize], s: &LossSettings) -> Result<(Var, f64)> {
    let logits = model.ctc_logits(g, enc);
    let lp = g.log_softmax_rows(logits);
    let (l, mut gr) = ctc_loss(g.value(lp), labels, s.ids.blank)?;
    let norm = 1.0 / labels.len().max(1) as f64;
    gr.scale_assign(norm);
    let l = l * norm;
    Ok((g.loss(lp, l, gr), l))
}

/// Builds the task graph for one example. Returns the root and components.
pub fn build_loss<'p>(
    g: &mut Graph<'p>,
    model: &Model,
    ex: &Example,
    feats: Option<&Matrix>,
    s: &LossSettings,
) -> Result<(Var, LossParts)> {
    let task = s.task;
    let speech = |g: &mut Graph<'p>| -> Result<Var> {
        let f = feats.ok_or_else(|| Error::Data(format!("{task:?} example {:?} lacks audio features", ex.id)))?;
        let x = g.input(f.clone());
        Ok(model.encode_speech(g, x))
    };
    match task {
        Task::Asr => {
            let labels = require(&ex.ctc_ids, "CTC labels", ex, task)?;
            let enc = speech(g)?;
            let (v, l) = ctc_term(g, model, enc, labels, s)?;
            Ok((v, LossParts { total: l, asr: l, ..Default::default() }))
        }
        Task::St => {
            let tgt = require(&ex.tgt_ids, "target tokens", ex, task)?;
            let enc = speech(g)?;
            let (v, l) = decoder_term(g, model, enc, tgt, s)?;
            Ok((v, LossParts { total: l, st: l, ..Default::default() }))
        }
        Task::Mt => {
            let src = require(&ex.src_ids, "source tokens", ex, task)?;
            let tgt = require(&ex.tgt_ids, "target tokens", ex, task)?;
            let mem = model.encode_text(g, src);
            let (v, l) = decoder_term(g, model, mem, tgt, s)?;
            Ok((v, LossParts { total: l, mt: l, ..Default::default() }))
        }
        Task::Joint => {
            let tgt = require(&ex.tgt_ids, "target tokens", ex, task)?;
            let src = require(&ex.src_ids, "pseudo-phonetic source (run pseudo_phonetize first)", ex, task)?;
            let labels = require(&ex.ctc_ids, "pseudo-phonetic CTC labels (run pseudo_phonetize first)", ex, task)?;
            let enc = speech(g)?;
            let (v_st, st) = decoder_term(g, model, enc, tgt, s)?;
            let mem = model.encode_text(g, src);
            let (v_mt, mt) = decoder_term(g, model, mem, tgt, s)?;
            let (v_asr, asr) = ctc_term(g, model, enc, labels, s)?;
            let w = s.weights;
            let root = g.weighted_sum(&[(v_st, w.w_st), (v_mt, w.w_mt), (v_asr, w.w_asr)]);
            let total = g.scalar(root);
            Ok((root, LossParts { total, st, mt, asr }))
        }
    }
}

/// Loss and gradients for one example.
pub fn example_gradients(model: &Model, ex: &Example, feats: Option<&Matrix>, s: &LossSettings) -> Result<(LossParts, Gradients)> {
    let mut g = Graph::new(&model.params);
    let (root, parts) = build_loss(&mut g, model, ex, feats, s)?;
    Ok((parts, g.backward(root)))
}

/// Mean loss over `examples` without gradients.
pub fn evaluate_loss(model: &Model, examples: &[Example], s: &LossSettings) -> Result<LossParts> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let mut acc = LossParts::default();
    for ex in examples {
        let mut g = Graph::inference(&model.params);
        let (_, p) = build_loss(&mut g, model, ex, ex.feats.as_ref(), s)?;
        acc.total += p.total;
        acc.st += p.st;
        acc.mt += p.mt;
        acc.asr += p.asr;
    }
    let n = examples.len() as f64;
    Ok(LossParts {
        total: acc.total / n,
        st: acc.st / n,
        mt: acc.mt / n,
        asr: acc.asr / n,
    })
}

// --- training loop ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Encoder learning rate as a fraction of `peak_lr`.
    pub encoder_lr_scale: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub weights: JointLossWeights,
    pub best_k: usize,
    /// Stop once this many optimiser steps have been taken (0 = no cap).
    pub max_steps: u64,
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Prefixes of frozen parameters.
    pub freeze: Vec<String>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            peak_lr: 2e-3,
            encoder_lr_scale: 0.1,
            warmup_steps: 100,
            label_smoothing: 0.1,
            weights: JointLossWeights::default(),
            best_k: 10,
            max_steps: 0,
            spec_augment: None,
            freeze: Vec::new(),
            seed: 0,
        }
    }
}

/// Validation measure computed once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidMetric {
    pub value: f64,
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestEntry {
    pub metric: f64,
    pub epoch: usize,
    pub model: Model,
}

/// Progress plus the `K` best checkpoints, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub best_k: usize,
    pub best_list: Vec<BestEntry>,
}

impl TrainState {
    pub fn new(best_k: usize) -> Self {
        Self {
            epoch: 0,
            global_step: 0,
            best_k: best_k.max(1),
            best_list: Vec::new(),
        }
    }

    /// Inserts a checkpoint if it ranks among the best `K`; returns whether
    /// it was kept. Equal metrics keep the earlier checkpoint first.
    pub fn offer(&mut self, metric: ValidMetric, epoch: usize, model: &Model) -> bool {
        let better = |a: f64, b: f64| if metric.higher_is_better { a > b } else { a < b };
        let pos = self
            .best_list
            .iter()
            .position(|e| better(metric.value, e.metric))
            .unwrap_or(self.best_list.len());
        if pos >= self.best_k {
            return false;
        }
        self.best_list.insert(
            pos,
            BestEntry {
                metric: metric.value,
                epoch,
                model: model.clone(),
            },
        );
        self.best_list.truncate(self.best_k);
        true
    }
}

/// Loss components of one optimiser step (means over the batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossParts,
    pub valid: f64,
}

impl EpochRecord {
    /// `epoch step lr loss_total [loss_st loss_mt loss_asr] valid_metric`;
    /// the bracketed components appear for the joint task only.
    pub fn render(&self, task: Task) -> String {
        let mut s = format!("{} {} {:.6e} {:.6}", self.epoch, self.step, self.lr, self.loss.total);
        if task == Task::Joint {
            write!(s, " {:.6} {:.6} {:.6}", self.loss.st, self.loss.mt, self.loss.asr).unwrap();
        }
        write!(s, " {:.6}", self.valid).unwrap();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model,
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn log(&self, task: Task) -> String {
        self.epochs.iter().map(|e| e.render(task) + "\n").collect()
    }
}

/// Deterministic length-bucketed batches: indices sorted by length are cut
/// into `batch_size` chunks whose order is shuffled per epoch.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    idx.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
    batches.shuffle(&mut rng);
    batches
}

/// Trains `model` on `train` for the configured epochs.
///
/// After each epoch `validate` scores the current parameters; the result
/// feeds the best-`K` list. Training is deterministic given the schedule seed.
pub fn train<V>(mut model: Model, task: Task, train: &[Example], ids: SpecialIds, schedule: &Schedule, mut validate: V) -> Result<TrainOutcome>
where
    V: FnMut(&Model) -> Result<ValidMetric>,
{
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    schedule.weights.validate()?;
    let settings = LossSettings {
        task,
        weights: schedule.weights,
        label_smoothing: schedule.label_smoothing,
        ids,
    };
    let freeze = crate::nnet::set_freeze(&model, &schedule.freeze);
    let mut opt = DualOptimizer::new(
        AdamConfig::with_lr(schedule.peak_lr * schedule.encoder_lr_scale),
        AdamConfig::with_lr(schedule.peak_lr),
    );
    let lengths: Vec<usize> = train.iter().map(Example::length).collect();
    let mut state = TrainState::new(schedule.best_k);
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut initial_loss = None;
    let mut final_loss = f64::NAN;
    let mut lr = 0.0;
    'outer: for epoch in 1..=schedule.epochs {
        let mut sum = LossParts::default();
        let mut seen = 0usize;
        for batch in make_batches(&lengths, schedule.batch_size, schedule.seed, epoch) {
            if schedule.max_steps > 0 && state.global_step >= schedule.max_steps {
                break 'outer;
            }
            let mut grads = Gradients::new();
            let mut parts = LossParts::default();
            for &i in &batch {
                let ex = &train[i];
                let aug;
                let feats = match (&ex.feats, &schedule.spec_augment) {
                    (Some(f), Some(cfg)) => {
                        let seed = schedule.seed ^ ((epoch as u64) << 32) ^ i as u64;
                        aug = spec_augment(f, cfg, seed)?;
                        Some(&aug)
                    }
                    (f, _) => f.as_ref(),
                };
                let (p, g) = example_gradients(&model, ex, feats, &settings)?;
                if !p.total.is_finite() {
                    return Err(Error::NonFinite(format!("loss on example {:?}", ex.id)));
                }
                grads.merge(&g);
                parts.total += p.total;
                parts.st += p.st;
                parts.mt += p.mt;
                parts.asr += p.asr;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            let mean = LossParts {
                total: parts.total / n,
                st: parts.st / n,
                mt: parts.mt / n,
                asr: parts.asr / n,
            };
            initial_loss.get_or_insert(mean.total);
            state.global_step += 1;
            let factor = lr_factor(state.global_step, schedule.warmup_steps);
            lr = schedule.peak_lr * factor;
            opt.step(&mut model.params, &grads, &freeze, factor)?;
            steps.push(StepRecord {
                step: state.global_step,
                lr,
                loss: mean,
            });
            sum.total += parts.total;
            sum.st += parts.st;
            sum.mt += parts.mt;
            sum.asr += parts.asr;
            seen += batch.len();
        }
        if seen == 0 {
            break;
        }
        let n = seen as f64;
        let mean = LossParts {
            total: sum.total / n,
            st: sum.st / n,
            mt: sum.mt / n,
            asr: sum.asr / n,
        };
        final_loss = mean.total;
        state.epoch = epoch;
        let metric = validate(&model)?;
        state.offer(metric, epoch, &model);
        let rec = EpochRecord {
            epoch,
            step: state.global_step,
            lr,
            loss: mean,
            valid: metric.value,
        };
        log::info!("{}", rec.render(task));
        epochs.push(rec);
    }
    Ok(TrainOutcome {
        model,
        state,
        epochs,
        steps,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_loss,
    })
}

// --- masked-frame pretraining -------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub freeze: Vec<String>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            mask_prob: 0.3,
            peak_lr: 2e-3,
            warmup_steps: 20,
            seed: 0,
            freeze: Vec::new(),
        }
    }
}

/// Smallest accepted masking probability.
pub const MIN_MASK_PROB: f64 = 0.05;

/// Chooses masked encoder positions (at least one) for a `frames`-long input.
fn mfp_mask(model: &Model, frames: usize, mask_prob: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let p = model.config.encoder_len(frames);
    let mut mask: Vec<bool> = (0..p).map(|_| rng.gen_bool(mask_prob)).collect();
    if !mask.iter().any(|&m| m) {
        let i = rng.gen_range(0..p);
        mask[i] = true;
    }
    mask
}

/// Masked-frame reconstruction: input frames under each masked position's
/// receptive field are zeroed and the encoder must predict the original
/// centre frame. Mean squared error over masked positions and dimensions.
pub fn mfp_loss<'p>(g: &mut Graph<'p>, model: &Model, feats: &Matrix, mask: &[bool]) -> Result<(Var, f64)> {
    let k = model.config.conv_kernel;
    let s = model.config.conv_stride;
    let t = feats.rows();
    let mut corrupted = feats.clone();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for r in p * s..(p * s + k).min(t) {
            corrupted.row_mut(r).fill(0.0);
        }
    }
    let x = g.input(corrupted);
    let enc = model.encode_speech(g, x);
    let pred = model.mfp_predictions(g, enc);
    let pv = g.value(pred);
    let f = pv.cols();
    let n_masked = mask.iter().filter(|&&m| m).count();
    let denom = (n_masked * f) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pv.rows(), f);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let centre = (p * s + k / 2).min(t - 1);
        for c in 0..f {
            let d = pv.get(p, c) - feats.get(centre, c);
            loss += d * d / denom;
            grad.set(p, c, 2.0 * d / denom);
        }
    }
    Ok((g.loss(pred, loss, grad), loss))
}

/// Held-out reconstruction error with masks fixed by `seed`.
pub fn mfp_eval(model: &Model, feats: &[Matrix], mask_prob: f64, seed: u64) -> Result<f64> {
    if feats.is_empty() {
        return Err(Error::invalid("no held-out utterances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for f in feats {
        let mask = mfp_mask(model, f.rows(), mask_prob, &mut rng);
        let mut g = Graph::inference(&model.params);
        total += mfp_loss(&mut g, model, f, &mask)?.1;
    }
    Ok(total / feats.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: Model,
    pub initial_valid: f64,
    pub final_valid: f64,
    pub losses: Vec<f64>,
}

/// Trains the speech encoder and reconstruction head on unlabeled features.
pub fn pretrain_masked_frames(mut model: Model, train: &[Matrix], valid: &[Matrix], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if !(cfg.mask_prob >= MIN_MASK_PROB && cfg.mask_prob < 1.0) {
        return Err(Error::invalid(format!(
            "mask_prob must be in [{MIN_MASK_PROB}, 1), got {}",
            cfg.mask_prob
        )));
    }
    if !model.config.mfp_head {
        return Err(Error::invalid("model lacks the masked-frame head (set mfp_head)"));
    }
    if train.is_empty() {
        return Err(Error::Data("no pretraining utterances".into()));
    }
    let eval_seed = cfg.seed ^ 0x0e7a1;
    let initial_valid = mfp_eval(&model, valid, cfg.mask_prob, eval_seed)?;
    let freeze = crate::nnet::set_freeze(&model, &cfg.freeze);
    let mut opt = DualOptimizer::new(AdamConfig::with_lr(cfg.peak_lr), AdamConfig::with_lr(cfg.peak_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths: Vec<usize> = train.iter().map(Matrix::rows).collect();
    let mut losses = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0;
    while step < cfg.steps {
        epoch += 1;
        for batch in make_batches(&lengths, cfg.batch_size, cfg.seed, epoch) {
            if step >= cfg.steps {
                break;
            }
            let mut grads = Gradients::new();
            let mut sum = 0.0;
            for &i in &batch {
                let mask = mfp_mask(&model, train[i].rows(), cfg.mask_prob, &mut rng);
                let mut g = Graph::new(&model.params);
                let (root, l) = mfp_loss(&mut g, &model, &train[i], &mask)?;
                grads.merge(&g.backward(root));
                sum += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            step += 1;
            opt.step(&mut model.params, &grads, &freeze, lr_factor(step, cfg.warmup_steps))?;
            losses.push(sum / batch.len() as f64);
        }
    }
    let final_valid = mfp_eval(&model, valid, cfg.mask_prob, eval_seed)?;
    Ok(PretrainOutcome {
        model,
        initial_valid,
        final_valid,
        losses,
    })
}

// --- checkpoint averaging -----------------------------------------------

/// Elementwise mean of parameter sets with identical names and shapes.
pub fn average_params(sets: &[&ParamSet]) -> Result<ParamSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let mut out = ParamSet::new();
    for (name, m0) in first.iter() {
        let mut acc = Matrix::zeros(m0.rows(), m0.cols());
        for s in sets {
            let m = s.get(name).ok_or_else(|| Error::Shape {
                name: name.to_string(),
                expected: format!("{}x{}", m0.rows(), m0.cols()),
                found: "missing".into(),
            })?;
            if m.shape() != m0.shape() {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: format!("{}x{}", m0.rows(), m0.cols()),
                    found: format!("{}x{}", m.rows(), m.cols()),
                });
            }
            acc.add_assign(m);
        }
        acc.scale_assign(1.0 / sets.len() as f64);
        out.insert(name, acc);
    }
    for s in &sets[1..] {
        if let Some(extra) = s.names().find(|n| !first.contains(n)) {
            return Err(Error::Shape {
                name: extra.to_string(),
                expected: "absent".into(),
                found: "unexpected tensor".into(),
            });
        }
    }
    Ok(out)
}

pub fn average_checkpoints(models: &[&Model]) -> Result<Model> {
    let first = models.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let sets: Vec<&ParamSet> = models.iter().map(|m| &m.params).collect();
    let params = average_params(&sets)?;
    Model::from_params(first.config.clone(), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ctc_two_frame_hand_case() {
        let lp = Matrix::filled(2, 2, 0.5f64.ln());
        let (l, _) = ctc_loss(&lp, &[0], 1).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank() {
        let lp = crate::tensor::log_softmax_rows(&Matrix::from_rows(&[vec![0.3, 1.0], vec![-0.2, 0.4]]));
        let (l, _) = ctc_loss(&lp, &[], 0).unwrap();
        assert!((l + lp.get(0, 0) + lp.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn ctc_needs_enough_frames() {
        let lp = Matrix::filled(2, 3, (1.0f64 / 3.0).ln());
        assert!(ctc_loss(&lp, &[1, 1], 0).is_err());
        assert!(ctc_loss(&lp, &[1, 2], 0).is_ok());
    }

    #[test]
    fn nll_uniform_and_smoothed() {
        let v = 3;
        let lp = Matrix::filled(2, v, (1.0 / v as f64).ln());
        let (l, _) = nll_loss(&lp, &[0, 2], 0.0).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        // p = (0.7, 0.2, 0.1), target 0, ε = 0.1: q = (0.9333.., 0.0333.., 0.0333..)
        let p = [0.7f64, 0.2, 0.1];
        let lp = Matrix::from_rows(&[p.iter().map(|x| x.ln()).collect()]);
        let (l, _) = nll_loss(&lp, &[0], 0.1).unwrap();
        let q = [0.9 + 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let hand: f64 = -q.iter().zip(p).map(|(q, p)| q * p.ln()).sum::<f64>();
        assert!((l - hand).abs() < 1e-12);
    }

    #[test]
    fn eq1_weights() {
        let w = JointLossWeights::default();
        assert!((joint_loss(1.0, 2.0, 3.0, &w) - 1.9).abs() < 1e-12);
        let st = JointLossWeights { w_st: 1.0, w_mt: 0.0, w_asr: 0.0 };
        assert_eq!(joint_loss(4.5, 2.0, 3.0, &st), 4.5);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn schedule_shape() {
        let w = 100;
        assert_eq!(lr_factor(w, w), 1.0);
        for s in 1..w {
            assert!(lr_factor(s, w) < lr_factor(s + 1, w));
        }
        assert!(lr_factor(400, w) < 1.0);
        assert!((lr_factor(400, w) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_on_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", Matrix::from_vec(1, 1, vec![1.0]));
        let cfg = AdamConfig::with_lr(0.1);
        let mut adam = Adam::new(cfg);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let mut g = Gradients::new();
            g.insert("x", Matrix::from_vec(1, 1, vec![2.0 * params.get("x").unwrap().data()[0]]));
            adam.step(&mut params, &g, 1.0, |_| true);
            let gr = 2.0 * x;
            m = 0.9 * m + 0.1 * gr;
            v = 0.98 * v + 0.02 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.98f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-9);
            assert!((params.get("x").unwrap().data()[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn best_list_is_capped_and_sorted() {
        let m = crate::nnet::Model::build(
            crate::nnet::ModelConfig {
                feat_dim: 2,
                d_model: 2,
                n_heads: 1,
                d_ff: 2,
                n_enc_layers: 1,
                ctc_hidden: 0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut st = TrainState::new(3);
        for (e, v) in [5.0, 3.0, 4.0, 1.0, 6.0, 3.0].iter().enumerate() {
            st.offer(ValidMetric { value: *v, higher_is_better: false }, e, &m);
        }
        let metrics: Vec<f64> = st.best_list.iter().map(|b| b.metric).collect();
        assert_eq!(metrics, vec![1.0, 3.0, 3.0]);
        assert_eq!(st.best_list[1].epoch, 1);
    }

    #[test]
    fn average_small() {
        let mut a = ParamSet::new();
        a.insert("w", Matrix::row_vector(vec![0.0, 2.0]));
        let mut b = ParamSet::new();
        b.insert("w", Matrix::row_vector(vec![2.0, 4.0]));
        let avg = average_params(&[&a, &b]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[1.0, 3.0]);
        let mut c = ParamSet::new();
        c.insert("w", Matrix::row_vector(vec![1.0]));
        match average_params(&[&a, &c]) {
            Err(Error::Shape { name, .. }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
