//! Watermark embedding, decoding and black-box verification.
//!
//! Training minimizes `J = L_task + β_wm L_wm`. Each task batch of size `B`
//! is paired with `k = min(m, ⌊f B / (1 − f)⌋)` carriers,
//! where `f` is the carrier batch fraction (at most 0.16). Carriers are taken
//! in a shuffled cyclic order so every carrier is visited once per pass.

use crate::calibration::AuditThresholds;
use crate::carrier::CarrierBundle;
use crate::graph::Graph;
use crate::io::TaskData;
use crate::nn::{Adam, AdamConfig, Gradients, GraphObjective, Model, NnError, ParamSelector};
use crate::par::Exec;
use crate::rng::rng_for;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper limit on the carrier share of a training batch.
pub const MAX_CARRIER_FRACTION: f64 = 0.16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WatermarkError {
    #[error("size mismatch: thresholds for m = {thresholds}, bundle has {bundle} carriers")]
    SizeMismatch { thresholds: usize, bundle: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, last_good: Box<Model> },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Anything that answers perception-score queries. Verification sees nothing else.
pub trait ScoreOracle: Sync {
    fn score(&self, g: &Graph) -> Result<f64, WatermarkError>;
}

impl ScoreOracle for Model {
    fn score(&self, g: &Graph) -> Result<f64, WatermarkError> {
        Ok(self.perception_score(g)?)
    }
}

/// Scores of all carriers, in carrier order.
pub fn carrier_scores(exec: Exec, oracle: &dyn ScoreOracle, bundle: &CarrierBundle) -> Result<Vec<f64>, WatermarkError> {
    exec.map_slice(&bundle.carriers, |g| oracle.score(g)).into_iter().collect()
}

/// `1` iff `score >= 0.5`.
pub fn decode_bit(score: f64) -> u8 {
    u8::from(score >= 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Verified,
    NotVerified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub m: usize,
    pub scores: Vec<f64>,
    pub decoded_bits: Vec<u8>,
    pub match_count: usize,
    pub tau: usize,
    pub decision: Decision,
    pub kappa: f64,
    pub per_bit_margins: Vec<f64>,
    pub wm_acc: f64,
}

/// Match count of decoded bits against the key.
pub fn match_count(key: &[u8], decoded: &[u8]) -> usize {
    key.iter().zip(decoded).filter(|(a, b)| a == b).count()
}

/// Builds the report from carrier scores alone.
pub fn report_from_scores(scores: Vec<f64>, key_bits: &[u8], tau: usize) -> Result<VerificationReport, WatermarkError> {
    if scores.len() != key_bits.len() {
        return Err(WatermarkError::SizeMismatch { thresholds: key_bits.len(), bundle: scores.len() });
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(WatermarkError::ScoreOutOfRange(s));
    }
    let decoded_bits: Vec<u8> = scores.iter().map(|&s| decode_bit(s)).collect();
    let t = match_count(key_bits, &decoded_bits);
    let per_bit_margins: Vec<f64> = scores.iter().map(|s| (s - 0.5).abs()).collect();
    let m = scores.len();
    Ok(VerificationReport {
        m,
        match_count: t,
        tau,
        decision: if t >= tau { Decision::Verified } else { Decision::NotVerified },
        kappa: margin_from_scores(&scores),
        wm_acc: if m == 0 { 0.0 } else { t as f64 / m as f64 },
        scores,
        decoded_bits,
        per_bit_margins,
    })
}

pub fn verify(oracle: &dyn ScoreOracle, bundle: &CarrierBundle, thresholds: &AuditThresholds) -> Result<VerificationReport, WatermarkError> {
    verify_with(Exec::default(), oracle, bundle, thresholds)
}

pub fn verify_with(
    exec: Exec,
    oracle: &dyn ScoreOracle,
    bundle: &CarrierBundle,
    thresholds: &AuditThresholds,
) -> Result<VerificationReport, WatermarkError> {
    if thresholds.m != bundle.len() {
        return Err(WatermarkError::SizeMismatch { thresholds: thresholds.m, bundle: bundle.len() });
    }
    report_from_scores(carrier_scores(exec, oracle, bundle)?, &bundle.key_bits, thresholds.tau)
}

/// `min_k |s_k − 1/2|`.
pub fn margin_from_scores(scores: &[f64]) -> f64 {
    scores.iter().map(|s| (s - 0.5).abs()).fold(f64::INFINITY, f64::min)
}

pub fn margin(oracle: &dyn ScoreOracle, bundle: &CarrierBundle) -> Result<f64, WatermarkError> {
    Ok(margin_from_scores(&carrier_scores(Exec::default(), oracle, bundle)?))
}

/// `max_k |a_k − b_k|`.
pub fn drift_from_scores(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn drift(a: &Model, b: &Model, bundle: &CarrierBundle) -> Result<f64, WatermarkError> {
    if !a.same_architecture(b) {
        return Err(NnError::ArchMismatch("drift between different architectures".into()).into());
    }
    let sa = carrier_scores(Exec::default(), a, bundle)?;
    let sb = carrier_scores(Exec::default(), b, bundle)?;
    Ok(drift_from_scores(&sa, &sb))
}

/// Fraction of carriers whose decoded bit equals the key bit.
pub fn wm_accuracy(model: &Model, bundle: &CarrierBundle) -> Result<f64, WatermarkError> {
    let scores = carrier_scores(Exec::default(), model, bundle)?;
    let decoded: Vec<u8> = scores.iter().map(|&s| decode_bit(s)).collect();
    Ok(match_count(&bundle.key_bits, &decoded) as f64 / bundle.len().max(1) as f64)
}

/// `(1/m) Σ_k (s(G_k) − t_k)²` and its gradient.
pub fn wm_loss(model: &Model, bundle: &CarrierBundle) -> Result<(f64, Gradients), WatermarkError> {
    wm_loss_with(Exec::default(), model, bundle)
}

pub fn wm_loss_with(exec: Exec, model: &Model, bundle: &CarrierBundle) -> Result<(f64, Gradients), WatermarkError> {
    let idx: Vec<usize> = (0..bundle.len()).collect();
    let objs: Vec<GraphObjective> = idx.iter().map(|&k| wm_objective(bundle, k, 1.0)).collect();
    Ok(mean_objective(exec, model, &bundle.carriers, &idx, &objs)?)
}

fn wm_objective(bundle: &CarrierBundle, k: usize, w: f64) -> GraphObjective {
    GraphObjective { wm: Some((bundle.targets[k], w)), ..GraphObjective::default() }
}

/// Mean of per-graph objectives over `idx` (graphs indexed into `graphs`),
/// evaluated in parallel and summed in index order.
pub(crate) fn mean_objective(
    exec: Exec,
    model: &Model,
    graphs: &[Graph],
    idx: &[usize],
    objs: &[GraphObjective],
) -> Result<(f64, Gradients), NnError> {
    let parts = exec.map(idx.len(), |i| model.objective_with_grad(&graphs[idx[i]], &objs[i]));
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model);
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.add_assign(&g);
    }
    if !idx.is_empty() {
        let k = 1.0 / idx.len() as f64;
        grads.scale(k);
        total *= k;
    }
    Ok((total, grads))
}

/// Classification accuracy on `idx`.
pub fn accuracy(model: &Model, task: &TaskData, idx: &[usize]) -> Result<f64, WatermarkError> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    Ok(correct_count(model, task, idx)? as f64 / idx.len() as f64)
}

/// Number of correctly classified graphs in `idx`.
pub fn correct_count(model: &Model, task: &TaskData, idx: &[usize]) -> Result<usize, WatermarkError> {
    let preds = Exec::default().map(idx.len(), |i| model.predict(&task.graphs[idx[i]]));
    let mut correct = 0;
    for (i, p) in preds.into_iter().enumerate() {
        correct += usize::from(p? == task.labels[idx[i]]);
    }
    Ok(correct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    #[default]
    CrossEntropy,
}

/// Learning-rate schedule over the whole run, evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `base * floor`.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let x = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub beta_wm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub task_loss: TaskLoss,
    pub carrier_batch_fraction: f64,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub spectral_nu: f64,
    pub spectral_iters: usize,
    /// When set, `beta_wm` above this bound is refused.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta_max: Option<f64>,
    /// Log `‖∇ L_task‖²` over the training split after each epoch (one extra
    /// backward pass per epoch).
    pub record_task_gradients: bool,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            beta_wm: 1.0,
            epochs: 300,
            batch_size: 32,
            task_loss: TaskLoss::CrossEntropy,
            carrier_batch_fraction: MAX_CARRIER_FRACTION,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            spectral_nu: 1.0,
            spectral_iters: 20,
            beta_max: None,
            record_task_gradients: false,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<(), WatermarkError> {
        let bad = |s: &str| Err(WatermarkError::InvalidConfig(s.into()));
        if !(self.beta_wm >= 0.0 && self.beta_wm.is_finite()) {
            return bad("beta_wm must be finite and nonnegative");
        }
        if let Some(bm) = self.beta_max {
            if self.beta_wm > bm {
                return bad("beta_wm exceeds beta_max");
            }
        }
        if !(self.carrier_batch_fraction > 0.0 && self.carrier_batch_fraction <= MAX_CARRIER_FRACTION) {
            return bad("carrier_batch_fraction must lie in (0, 0.16]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.spectral_iters == 0 || !(self.spectral_nu > 0.0) {
            return bad("spectral normalization needs nu > 0 and at least one iteration");
        }
        if let LrSchedule::Cosine { floor } = self.lr_schedule {
            if !(0.0..=1.0).contains(&floor) {
                return bad("cosine floor must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Carriers paired with a task batch of `b` graphs.
    pub fn carriers_per_batch(&self, b: usize, m: usize) -> usize {
        let f = self.carrier_batch_fraction;
        (((f * b as f64) / (1.0 - f)).floor() as usize).min(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy over the training split after the epoch.
    pub task_loss: f64,
    /// `‖∇ L_task‖²` over the training split after the epoch, when recorded.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_grad_norm_sq: Option<f64>,
    /// Carrier loss over the full bundle after the epoch (0 without a bundle).
    pub wm_loss: f64,
    pub wm_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// `(‖∇L‖², L − min L)` over the epochs with recorded gradients.
    pub fn pl_pairs(&self) -> Vec<(f64, f64)> {
        let rec: Vec<&EpochLog> = self.epochs.iter().filter(|e| e.task_grad_norm_sq.is_some()).collect();
        let g: Vec<f64> = rec.iter().map(|e| e.task_grad_norm_sq.unwrap_or(0.0)).collect();
        let l: Vec<f64> = rec.iter().map(|e| e.task_loss).collect();
        crate::calibration::pl_pairs_from_trajectory(&g, &l)
    }
}

/// Task objective (cross-entropy) over `idx`.
pub fn task_loss_with_grad(exec: Exec, model: &Model, task: &TaskData, idx: &[usize]) -> Result<(f64, Gradients), NnError> {
    let objs: Vec<GraphObjective> =
        idx.iter().map(|&i| GraphObjective { task: Some((task.labels[i], 1.0)), ..GraphObjective::default() }).collect();
    mean_objective(exec, model, &task.graphs, idx, &objs)
}

/// Mean cross-entropy over `idx`, forward passes only.
pub fn task_loss_value(exec: Exec, model: &Model, task: &TaskData, idx: &[usize]) -> Result<f64, NnError> {
    let parts = exec.map(idx.len(), |i| {
        let logits = model.logits(&task.graphs[idx[i]])?;
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        Ok::<f64, NnError>(lse - logits[task.labels[idx[i]]])
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(if idx.is_empty() { 0.0 } else { total / idx.len() as f64 })
}

/// What the task part of the objective fits.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    Labels,
    /// Tempered teacher probabilities, indexed like `task.graphs`.
    Teacher { probs: &'a [Vec<f64>], temperature: f64 },
}

/// Trains `model` on the task, plus the carrier loss when `bundle` is given
/// and `beta_wm > 0`. The perception head is spectral-normalized after every
/// optimizer step.
pub fn embed(model: Model, task: &TaskData, bundle: Option<&CarrierBundle>, cfg: &EmbedConfig) -> Result<(Model, TrainLog), WatermarkError> {
    embed_with(Exec::default(), model, task, bundle, cfg)
}

pub fn embed_with(
    exec: Exec,
    model: Model,
    task: &TaskData,
    bundle: Option<&CarrierBundle>,
    cfg: &EmbedConfig,
) -> Result<(Model, TrainLog), WatermarkError> {
    train(exec, model, task, bundle, cfg, Supervision::Labels, true)
}

/// Shared training loop behind [`embed`], fine-tuning and distillation.
/// `spectral_norm` toggles head normalization after each step.
pub fn train(
    exec: Exec,
    mut model: Model,
    task: &TaskData,
    bundle: Option<&CarrierBundle>,
    cfg: &EmbedConfig,
    sup: Supervision<'_>,
    spectral_norm: bool,
) -> Result<(Model, TrainLog), WatermarkError> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(WatermarkError::InvalidConfig("empty training split".into()));
    }
    if let Some(b) = bundle {
        if !b.norm_constants.is_frozen() {
            return Err(WatermarkError::InvalidConfig("normalization constants must be frozen".into()));
        }
    }
    if spectral_norm {
        model.apply_spectral_norm(cfg.spectral_nu, cfg.spectral_iters);
    }
    let mut opt = Adam::new(&model, cfg.adam);
    let m = bundle.map_or(0, CarrierBundle::len);
    let use_wm = m > 0 && cfg.beta_wm > 0.0;
    let mut carrier_order: Vec<usize> = Vec::new();
    let mut carrier_pos = 0usize;
    let mut carrier_pass = 0u64;
    let mut log = TrainLog::default();
    let steps_per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = task.train.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[0xe0, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let mut objs: Vec<GraphObjective> = batch
                .iter()
                .map(|&i| match sup {
                    Supervision::Labels => GraphObjective { task: Some((task.labels[i], w)), ..Default::default() },
                    Supervision::Teacher { probs, temperature } => {
                        GraphObjective { kd: Some((probs[i].clone(), temperature, w)), ..Default::default() }
                    }
                })
                .collect();
            let mut graphs_ref: Vec<&Graph> = batch.iter().map(|&i| &task.graphs[i]).collect();
            if use_wm {
                let b = bundle.expect("use_wm implies a bundle");
                let k = cfg.carriers_per_batch(batch.len(), m);
                for _ in 0..k {
                    if carrier_pos == carrier_order.len() {
                        carrier_order = (0..m).collect();
                        carrier_order.shuffle(&mut rng_for(cfg.seed, &[0xca, carrier_pass]));
                        carrier_pass += 1;
                        carrier_pos = 0;
                    }
                    let c = carrier_order[carrier_pos];
                    carrier_pos += 1;
                    objs.push(wm_objective(b, c, cfg.beta_wm / k as f64));
                    graphs_ref.push(&b.carriers[c]);
                }
            }
            let parts = exec.map(graphs_ref.len(), |i| model.objective_with_grad(graphs_ref[i], &objs[i]));
            let mut loss = 0.0;
            let mut grads = Gradients::zeros_like(&model);
            for p in parts {
                let (l, g) = match p {
                    Ok(x) => x,
                    Err(NnError::NonFinite) => {
                        return Err(WatermarkError::NonFiniteLoss { epoch, last_good: Box::new(model) })
                    }
                    Err(e) => return Err(e.into()),
                };
                loss += l;
                grads.add_assign(&g);
            }
            if !loss.is_finite() {
                return Err(WatermarkError::NonFiniteLoss { epoch, last_good: Box::new(model) });
            }
            let before = model.clone();
            opt.config.lr = cfg.adam.lr * cfg.lr_schedule.factor(step, total_steps);
            step += 1;
            match opt.step(&mut model, &grads) {
                Ok(()) => {}
                Err(NnError::NonFiniteGrad(_)) => return Err(WatermarkError::NonFiniteLoss { epoch, last_good: Box::new(before) }),
                Err(e) => return Err(e.into()),
            }
            if spectral_norm {
                model.apply_spectral_norm(cfg.spectral_nu, cfg.spectral_iters);
            }
            if model.flatten().iter().any(|x| !x.is_finite()) {
                return Err(WatermarkError::NonFiniteLoss { epoch, last_good: Box::new(before) });
            }
        }

        let (task_loss, task_grad_norm_sq) = if cfg.record_task_gradients {
            let (l, g) = task_loss_with_grad(exec, &model, task, &task.train)?;
            (l, Some(g.norm(ParamSelector::All).powi(2)))
        } else {
            (task_loss_value(exec, &model, task, &task.train)?, None)
        };
        let (wm_loss, wm_acc) = match bundle {
            Some(b) if m > 0 => {
                let scores = carrier_scores(exec, &model, b)?;
                let l = scores.iter().zip(&b.targets).map(|(s, t)| (s - t).powi(2)).sum::<f64>() / m as f64;
                let dec: Vec<u8> = scores.iter().map(|&s| decode_bit(s)).collect();
                (l, match_count(&b.key_bits, &dec) as f64 / m as f64)
            }
            _ => (0.0, 0.0),
        };
        if !task_loss.is_finite() || !wm_loss.is_finite() {
            return Err(WatermarkError::NonFiniteLoss { epoch, last_good: Box::new(model) });
        }
        log.epochs.push(EpochLog { epoch, task_loss, task_grad_norm_sq, wm_loss, wm_acc });
    }
    Ok((model, log))
}
