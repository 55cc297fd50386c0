//! End-to-end runs: carriers, thresholds, embedding, verification, a
//! `β_wm = 0` control and optional edits, with every artifact written as
//! canonical JSON.
//!
//! Output directory layout:
//! - `manifest.json`: resolved configuration, toolkit version, stage status,
//!   creation time (the only time-dependent file)
//! - `bundle.json`: carrier bundle (secret key material)
//! - `calibration.json`, `train_log.json`, `verification.json`, `summary.json`
//! - `model.json`, plus `control_model.json` and `control_verification.json`
//!   when the control runs
//! - `attacks.json` when edits are configured

use crate::attacks::{apply_attack, AttackContext, AttackResult, AttackSpec, BudgetConstants};
use crate::calibration::{AuditThresholds, CalibrationReport};
use crate::carrier::{build_bundle_with, estimate_rho0_with, CarrierBundle, ProtocolParams};
use crate::io::{emit_report, load_tudataset, make_synthetic_task, TaskData};
use crate::nn::{Hyper, Model};
use crate::par::Exec;
use crate::watermark::{correct_count, embed_with, verify_with, Decision, EmbedConfig, TrainLog, VerificationReport};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const TOOLKIT: &str = "graphmark";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Mixing level the carrier protocol is expected to stay under.
pub const RHO0_BOUND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LoadData,
    GenCarriers,
    Calibrate,
    Embed,
    Verify,
    Control,
    Attack,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

fn at<T, E: std::error::Error + Send + Sync + 'static>(stage: Stage, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError { stage, source: Box::new(e) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Size of the synthetic task; ignored with `dataset_dir`.
    pub n_graphs: usize,
    /// TU dataset directory to use instead of the synthetic task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_dir: Option<PathBuf>,
    pub m: usize,
    pub alpha: f64,
    pub hyper: Hyper,
    pub embed: EmbedConfig,
    pub protocol: ProtocolParams,
    /// Train and verify a `β_wm = 0` model from the same initialization.
    pub control: bool,
    pub attacks: Vec<AttackSpec>,
    /// Epochs of a full distillation run.
    pub kd_full_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget_constants: Option<BudgetConstants>,
    /// Add the reference worked-example comparison to the calibration report.
    pub paper_compat: bool,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_graphs: 500,
            dataset_dir: None,
            m: 128,
            alpha: 1e-6,
            hyper: Hyper::default(),
            embed: EmbedConfig { seed, ..EmbedConfig::default() },
            protocol: ProtocolParams::with_seed(seed),
            control: true,
            attacks: Vec::new(),
            kd_full_epochs: 100,
            budget_constants: None,
            paper_compat: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStage {
    pub rho0: f64,
    pub rho0_bound: f64,
    pub rho0_within_bound: bool,
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub m: usize,
    pub tau: usize,
    pub rho0: f64,
    pub test_accuracy: f64,
    pub wm_acc: f64,
    pub kappa: f64,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub control_test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub control_wm_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub control_decision: Option<Decision>,
    /// `100 · (control − watermarked)` test accuracy, in percentage points.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_drop_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub ok: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit: String,
    pub version: String,
    pub created_unix: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(config: &PipelineConfig) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            toolkit: TOOLKIT.into(),
            version: VERSION.into(),
            created_unix,
            config: config.clone(),
            stages: Vec::new(),
            error: None,
        }
    }
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub task: TaskData,
    pub bundle: CarrierBundle,
    pub calibration: CalibrationStage,
    pub thresholds: AuditThresholds,
    pub model: Model,
    pub log: TrainLog,
    pub report: VerificationReport,
    pub control_model: Option<Model>,
    pub control_report: Option<VerificationReport>,
    pub attacks: Vec<AttackResult>,
    pub summary: PipelineSummary,
}

/// Task for a configuration: the TU dataset when given, else the synthetic task.
pub fn load_task(cfg: &PipelineConfig) -> Result<TaskData, PipelineError> {
    match &cfg.dataset_dir {
        Some(dir) => {
            let ds = at(Stage::LoadData, load_tudataset(dir))?;
            at(Stage::LoadData, TaskData::with_split(ds.graphs, ds.labels, cfg.seed))
        }
        None => at(Stage::LoadData, make_synthetic_task(cfg.n_graphs, cfg.seed)),
    }
}

struct Recorder<'a> {
    manifest: Manifest,
    out: Option<&'a Path>,
}

impl Recorder<'_> {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        let t0 = Instant::now();
        let r = f();
        self.manifest.stages.push(StageRecord { stage, ok: r.is_ok(), seconds: t0.elapsed().as_secs_f64() });
        if let Err(e) = &r {
            self.manifest.error = Some(e.to_string());
        }
        r
    }

    fn flush(&self) {
        if let Some(dir) = self.out {
            // Best effort: the manifest is written on failure paths too.
            let _ = emit_report(&self.manifest, &dir.join("manifest.json"));
        }
    }
}

pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineOutcome, PipelineError> {
    run_pipeline_with(Exec::default(), cfg, out)
}

/// Runs every stage in order. On failure the partial manifest (with the
/// failing stage) is still written.
pub fn run_pipeline_with(exec: Exec, cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineOutcome, PipelineError> {
    let mut rec = Recorder { manifest: Manifest::new(cfg), out };
    let r = run_stages(exec, cfg, out, &mut rec);
    if let Err(e) = &r {
        if rec.manifest.error.is_none() {
            rec.manifest.error = Some(e.to_string());
        }
    }
    rec.flush();
    r
}

fn run_stages(exec: Exec, cfg: &PipelineConfig, out: Option<&Path>, rec: &mut Recorder<'_>) -> Result<PipelineOutcome, PipelineError> {
    if let Some(dir) = out {
        at(Stage::Write, std::fs::create_dir_all(dir))?;
    }
    let task = rec.run(Stage::LoadData, || load_task(cfg))?;
    let hyper = Hyper { input_dim: task.feature_dim(), num_classes: task.num_classes.max(2), ..cfg.hyper.clone() };
    let train_graphs = task.train_graphs();

    let bundle = rec.run(Stage::GenCarriers, || {
        let b = at(Stage::GenCarriers, build_bundle_with(exec, &train_graphs, cfg.m, &cfg.protocol))?;
        rec_emit(out, "bundle.json", &b)?;
        Ok(b)
    })?;

    let (calibration, thresholds) = rec.run(Stage::Calibrate, || {
        let rho0 = at(Stage::Calibrate, estimate_rho0_with(exec, &bundle, None))?;
        let report = at(Stage::Calibrate, CalibrationReport::new(bundle.len(), cfg.alpha, rho0, cfg.paper_compat))?;
        let thresholds = report.thresholds;
        let c = CalibrationStage { rho0, rho0_bound: RHO0_BOUND, rho0_within_bound: rho0 <= RHO0_BOUND, report };
        rec_emit(out, "calibration.json", &c)?;
        Ok((c, thresholds))
    })?;

    let init = at(Stage::Embed, Model::new(hyper, cfg.seed))?;
    let (model, log) = rec.run(Stage::Embed, || {
        let (m, log) = at(Stage::Embed, embed_with(exec, init.clone(), &task, Some(&bundle), &cfg.embed))?;
        save_model(out, "model.json", &m)?;
        rec_emit(out, "train_log.json", &log)?;
        Ok((m, log))
    })?;

    let report = rec.run(Stage::Verify, || {
        let r = at(Stage::Verify, verify_with(exec, &model, &bundle, &thresholds))?;
        rec_emit(out, "verification.json", &r)?;
        Ok(r)
    })?;
    let test_correct = at(Stage::Verify, correct_count(&model, &task, &task.test))?;
    let test_accuracy = test_correct as f64 / task.test.len().max(1) as f64;

    let (control_model, control_report) = if cfg.control {
        let (cm, cr) = rec.run(Stage::Control, || {
            let ccfg = EmbedConfig { beta_wm: 0.0, ..cfg.embed };
            let (cm, _) = at(Stage::Control, embed_with(exec, init.clone(), &task, Some(&bundle), &ccfg))?;
            let cr = at(Stage::Control, verify_with(exec, &cm, &bundle, &thresholds))?;
            save_model(out, "control_model.json", &cm)?;
            rec_emit(out, "control_verification.json", &cr)?;
            Ok((cm, cr))
        })?;
        (Some(cm), Some(cr))
    } else {
        (None, None)
    };
    let control_correct = match &control_model {
        Some(cm) => Some(at(Stage::Control, correct_count(cm, &task, &task.test))?),
        None => None,
    };
    let n_test = task.test.len().max(1) as f64;
    let control_test_accuracy = control_correct.map(|c| c as f64 / n_test);

    let attacks = if cfg.attacks.is_empty() {
        Vec::new()
    } else {
        rec.run(Stage::Attack, || {
            let ctx = AttackContext { exec, train: cfg.embed, kd_full_epochs: cfg.kd_full_epochs, student_seed: cfg.seed };
            let mut results = Vec::new();
            for spec in &cfg.attacks {
                let (_, r) = at(
                    Stage::Attack,
                    apply_attack(&ctx, &model, &task, &bundle, &thresholds, spec, cfg.budget_constants.as_ref()),
                )?;
                results.push(r);
            }
            rec_emit(out, "attacks.json", &results)?;
            Ok(results)
        })?
    };

    let summary = PipelineSummary {
        seed: cfg.seed,
        m: bundle.len(),
        tau: thresholds.tau,
        rho0: calibration.rho0,
        test_accuracy,
        wm_acc: report.wm_acc,
        kappa: report.kappa,
        decision: report.decision,
        control_test_accuracy,
        control_wm_acc: control_report.as_ref().map(|r| r.wm_acc),
        control_decision: control_report.as_ref().map(|r| r.decision),
        accuracy_drop_pp: control_correct.map(|c| 100.0 * (c as f64 - test_correct as f64) / n_test),
    };
    rec_emit(out, "summary.json", &summary)?;
    Ok(PipelineOutcome {
        task,
        bundle,
        calibration,
        thresholds,
        model,
        log,
        report,
        control_model,
        control_report,
        attacks,
        summary,
    })
}

fn rec_emit<T: Serialize>(out: Option<&Path>, name: &str, value: &T) -> Result<(), PipelineError> {
    match out {
        Some(dir) => at(Stage::Write, emit_report(value, &dir.join(name))),
        None => Ok(()),
    }
}

fn save_model(out: Option<&Path>, name: &str, model: &Model) -> Result<(), PipelineError> {
    match out {
        Some(dir) => at(Stage::Write, model.save(&dir.join(name))),
        None => Ok(()),
    }
}
