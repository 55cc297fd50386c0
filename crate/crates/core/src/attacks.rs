//! Post-hoc model edits and drift-budget calibration.
//!
//! Every attack works on its own copy of the model and is deterministic given
//! its seed. Drift `γ` is always measured on carrier perception scores.

use crate::calibration::{budget_rhs, AuditThresholds};
use crate::carrier::CarrierBundle;
use crate::io::TaskData;
use crate::nn::tape::softmax_tempered;
use crate::nn::{Model, NnError};
use crate::par::Exec;
use crate::watermark::{self, verify_with, EmbedConfig, Supervision, TrainLog, VerificationReport, WatermarkError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pruning fractions swept by [`calibrate_budget_constants`].
pub const PRUNE_SWEEP: [f64; 3] = [0.2, 0.4, 0.5];
/// Distillation shortfalls `π_kd` swept by [`calibrate_budget_constants`].
pub const DISTILL_SWEEP: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("KD+WM needs a carrier bundle")]
    BundleRequired,
    #[error("invalid attack specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    Prune,
    Finetune,
    Quantize,
    Kd,
    KdWm,
}

/// One edit. Only the fields for `kind` are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub prune_fraction: f64,
    pub ft_epochs: usize,
    pub bits: u32,
    pub kd_temperature: f64,
    /// Teacher retention `ρ_kd ∈ (0, 1]`; `π_kd = 1 − ρ_kd`.
    pub kd_retention: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self { kind, prune_fraction: 0.5, ft_epochs: 20, bits: 8, kd_temperature: 2.0, kd_retention: 1.0, seed: 0 }
    }

    pub fn pi_kd(&self) -> f64 {
        1.0 - self.kd_retention
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |s: &str| Err(AttackError::InvalidSpec(s.into()));
        match self.kind {
            AttackKind::Prune if !(0.0..=1.0).contains(&self.prune_fraction) => bad("prune_fraction must lie in [0, 1]"),
            AttackKind::Finetune if self.ft_epochs == 0 => bad("ft_epochs must be at least 1"),
            AttackKind::Quantize if !matches!(self.bits, 4 | 8) => bad("bits must be 4 or 8"),
            AttackKind::Kd | AttackKind::KdWm if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) => {
                bad("kd_temperature must be positive")
            }
            AttackKind::Kd | AttackKind::KdWm if !(self.kd_retention > 0.0 && self.kd_retention <= 1.0) => {
                bad("kd_retention must lie in (0, 1]")
            }
            _ => Ok(()),
        }
    }
}

/// Global magnitude pruning over all parameters: zeroes the `⌊p N⌋` entries
/// with the smallest `|w|`, ties broken by flat parameter index.
pub fn prune(model: &Model, p_pr: f64) -> Model {
    let mut out = model.clone();
    let flat = prune_flat(&model.flatten(), p_pr);
    out.assign_flat(&flat).expect("same length");
    out
}

pub fn prune_flat(values: &[f64], p_pr: f64) -> Vec<f64> {
    let p = p_pr.clamp(0.0, 1.0);
    let k = ((p * values.len() as f64).floor() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut out = values.to_vec();
    for &i in &order[..k] {
        out[i] = 0.0;
    }
    out
}

/// Symmetric fake quantization of one tensor to `bits` bits.
pub fn quantize_values(values: &[f64], bits: u32) -> Vec<f64> {
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 {
        return values.to_vec();
    }
    let scale = max / levels;
    values.iter().map(|&w| (w / scale).round() * scale).collect()
}

/// Per-tensor fake quantization of every parameter.
pub fn quantize(model: &Model, bits: u32) -> Model {
    let mut out = model.clone();
    for p in &mut out.params {
        p.tensor.values = quantize_values(&p.tensor.values, bits);
    }
    out
}

/// Task-only training on the clean training split. Returns the edited model
/// and `Δθ = ‖θ_ft − θ‖₂`.
pub fn finetune(exec: Exec, model: &Model, task: &TaskData, epochs: usize, base: &EmbedConfig) -> Result<(Model, f64), AttackError> {
    if epochs == 0 {
        return Err(AttackError::InvalidSpec("ft_epochs must be at least 1".into()));
    }
    let cfg = EmbedConfig { epochs, beta_wm: 0.0, beta_max: None, record_task_gradients: false, ..*base };
    let (out, _) = watermark::train(exec, model.clone(), task, None, &cfg, Supervision::Labels, false)?;
    let d = out.distance(model)?;
    Ok((out, d))
}

/// KD epochs for shortfall `π_kd`: `round((1 − π_kd) · full_epochs)`.
pub fn kd_epochs(pi_kd: f64, full_epochs: usize) -> usize {
    ((1.0 - pi_kd).clamp(0.0, 1.0) * full_epochs as f64).round() as usize
}

/// Distills `teacher` into `student` on tempered teacher probabilities. With
/// a bundle, the carrier loss is added at `cfg.beta_wm` (KD+WM).
pub fn kd(
    exec: Exec,
    teacher: &Model,
    student: Model,
    task: &TaskData,
    temperature: f64,
    bundle: Option<&CarrierBundle>,
    cfg: &EmbedConfig,
) -> Result<(Model, TrainLog), AttackError> {
    if !teacher.same_architecture(&student) {
        return Err(NnError::ArchMismatch("student must match the teacher".into()).into());
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AttackError::InvalidSpec("kd_temperature must be positive".into()));
    }
    let logits = exec.map(task.graphs.len(), |i| teacher.logits(&task.graphs[i]));
    let mut probs = Vec::with_capacity(logits.len());
    for l in logits {
        probs.push(softmax_tempered(&l?, temperature));
    }
    let cfg = EmbedConfig { beta_wm: if bundle.is_some() { cfg.beta_wm } else { 0.0 }, ..*cfg };
    if cfg.epochs == 0 {
        return Ok((student, TrainLog::default()));
    }
    let sup = Supervision::Teacher { probs: &probs, temperature };
    Ok(watermark::train(exec, student, task, bundle, &cfg, sup, true)?)
}

/// Calibrated constants of the drift budget `γ ≤ L_s Δθ + ĉ_prune √p + ĉ_distill π_kd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConstants {
    pub l_s: f64,
    pub c_prune: f64,
    pub c_distill: f64,
}

/// Settings shared by the attack drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackContext {
    pub exec: Exec,
    /// Base training settings for fine-tuning and distillation.
    pub train: EmbedConfig,
    /// Epochs of a full (`π_kd = 0`) distillation run.
    pub kd_full_epochs: usize,
    /// Hyperparameter seed of fresh students.
    pub student_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub spec: AttackSpec,
    /// `max_k |s_edit(G_k) − s_orig(G_k)|`.
    pub drift: f64,
    /// `‖θ_edit − θ_orig‖₂`.
    pub delta_theta: f64,
    pub report: VerificationReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<BudgetCheck>,
}

/// Budget terms charged to an edit: fine-tuning and quantization are
/// parameter displacements, pruning is charged by `p`, distillation by `π_kd`.
pub fn budget_for(spec: &AttackSpec, delta_theta: f64, c: &BudgetConstants) -> f64 {
    match spec.kind {
        AttackKind::Finetune | AttackKind::Quantize => budget_rhs(c.l_s, delta_theta, c.c_prune, 0.0, c.c_distill, 0.0),
        AttackKind::Prune => budget_rhs(c.l_s, 0.0, c.c_prune, spec.prune_fraction, c.c_distill, 0.0),
        AttackKind::Kd | AttackKind::KdWm => budget_rhs(c.l_s, 0.0, c.c_prune, 0.0, c.c_distill, spec.pi_kd()),
    }
}

/// Applies the edit and verifies the result.
pub fn apply_attack(
    ctx: &AttackContext,
    model: &Model,
    task: &TaskData,
    bundle: &CarrierBundle,
    thresholds: &AuditThresholds,
    spec: &AttackSpec,
    constants: Option<&BudgetConstants>,
) -> Result<(Model, AttackResult), AttackError> {
    spec.validate()?;
    let train = EmbedConfig { seed: spec.seed, ..ctx.train };
    let edited = match spec.kind {
        AttackKind::Prune => prune(model, spec.prune_fraction),
        AttackKind::Quantize => quantize(model, spec.bits),
        AttackKind::Finetune => finetune(ctx.exec, model, task, spec.ft_epochs, &train)?.0,
        AttackKind::Kd | AttackKind::KdWm => {
            let student = Model::new(model.hyper.clone(), crate::rng::derive_seed(ctx.student_seed, &[spec.seed]))?;
            let cfg = EmbedConfig { epochs: kd_epochs(spec.pi_kd(), ctx.kd_full_epochs), ..train };
            let b = (spec.kind == AttackKind::KdWm).then_some(bundle);
            kd(ctx.exec, model, student, task, spec.kd_temperature, b, &cfg)?.0
        }
    };
    let before = watermark::carrier_scores(ctx.exec, model, bundle)?;
    let report = verify_with(ctx.exec, &edited, bundle, thresholds)?;
    let drift = watermark::drift_from_scores(&report.scores, &before);
    let delta_theta = edited.distance(model)?;
    let budget = constants.map(|c| {
        let rhs = budget_for(spec, delta_theta, c);
        BudgetCheck { rhs, holds: drift <= rhs }
    });
    Ok((edited, AttackResult { spec: *spec, drift, delta_theta, report, budget }))
}

/// `max_p γ_p / √p` over `(p, γ_p)` pairs with `p > 0`.
pub fn c_prune_from_drifts(points: &[(f64, f64)]) -> f64 {
    points.iter().filter(|(p, _)| *p > 0.0).map(|(p, g)| g / p.sqrt()).fold(0.0, f64::max)
}

/// `max_π γ_π / π` over `(π, γ_π)` pairs with `π > 0`.
pub fn c_distill_from_drifts(points: &[(f64, f64)]) -> f64 {
    points.iter().filter(|(p, _)| *p > 0.0).map(|(p, g)| g / p).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCalibration {
    /// `(p, γ)`: drift of the pruned fine-tuned model against the fine-tuned model.
    pub prune_drifts: Vec<(f64, f64)>,
    /// `(π_kd, γ)`: drift of the distilled student against the 50%-pruned fine-tuned model.
    pub distill_drifts: Vec<(f64, f64)>,
    pub c_prune: f64,
    pub c_distill: f64,
}

/// Runs the pruning and distillation sweeps and takes the ratio maxima.
pub fn calibrate_budget_constants(
    ctx: &AttackContext,
    model: &Model,
    task: &TaskData,
    bundle: &CarrierBundle,
    ft_epochs: usize,
    temperature: f64,
) -> Result<BudgetCalibration, AttackError> {
    let (ft, _) = finetune(ctx.exec, model, task, ft_epochs, &ctx.train)?;
    let ft_scores = watermark::carrier_scores(ctx.exec, &ft, bundle)?;
    let mut prune_drifts = Vec::new();
    for &p in &PRUNE_SWEEP {
        let s = watermark::carrier_scores(ctx.exec, &prune(&ft, p), bundle)?;
        prune_drifts.push((p, watermark::drift_from_scores(&s, &ft_scores)));
    }
    let base = prune(&ft, 0.5);
    let base_scores = watermark::carrier_scores(ctx.exec, &base, bundle)?;
    let mut distill_drifts = Vec::new();
    for (i, &pi) in DISTILL_SWEEP.iter().enumerate() {
        let student = Model::new(model.hyper.clone(), crate::rng::derive_seed(ctx.student_seed, &[0xd1, i as u64]))?;
        let cfg = EmbedConfig { epochs: kd_epochs(pi, ctx.kd_full_epochs), ..ctx.train };
        let (s, _) = kd(ctx.exec, &base, student, task, temperature, None, &cfg)?;
        let sc = watermark::carrier_scores(ctx.exec, &s, bundle)?;
        distill_drifts.push((pi, watermark::drift_from_scores(&sc, &base_scores)));
    }
    Ok(BudgetCalibration {
        c_prune: c_prune_from_drifts(&prune_drifts),
        c_distill: c_distill_from_drifts(&distill_drifts),
        prune_drifts,
        distill_drifts,
    })
}
