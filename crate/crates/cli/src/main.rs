//! `graphmark` command-line driver.
//!
//! Exit codes: 0 success or VERIFIED, 3 NOT_VERIFIED, 2 usage error,
//! 1 runtime error.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graphmark::attacks::{apply_attack, AttackContext, AttackKind, AttackSpec};
use graphmark::calibration::{binomial_tail_half, monte_carlo_null, AuditThresholds, CalibrationReport};
use graphmark::carrier::{build_bundle, estimate_rho0, task_hash_digest, CarrierBundle, ProtocolParams};
use graphmark::hardness::{brute_force_hitting_set, brute_force_wm_remove, parse_dimacs, reduce_hitting_set};
use graphmark::io::{emit_report, load_json, to_canonical_json, TaskData};
use graphmark::nn::{Hyper, LayerKind, Model};
use graphmark::pipeline::{load_task, run_pipeline, PipelineConfig};
use graphmark::watermark::{embed, verify, Decision, EmbedConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "graphmark", version, about = "Spectral-invariant ownership watermarks for graph neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a carrier bundle (secret key material) from a task.
    GenCarriers(GenCarriersArgs),
    /// Compute verification thresholds for m carriers.
    Calibrate(CalibrateArgs),
    /// Train a watermarked model.
    Embed(EmbedArgs),
    /// Verify a model against a bundle (exit 0 VERIFIED, 3 NOT_VERIFIED).
    Verify(VerifyArgs),
    /// Edit a model and verify the result (exit 0 VERIFIED, 3 NOT_VERIFIED).
    Attack(AttackArgs),
    /// Reduce a hitting-set instance to a watermark-removal instance.
    Reduce(ReduceArgs),
    /// Monte Carlo false-positive rate under random keys.
    McNull(McNullArgs),
    /// Full run: carriers, calibration, embedding, verification, control, edits.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Seed of the synthetic task and of the data split.
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Number of synthetic graphs.
    #[arg(long, default_value_t = 500)]
    n_graphs: usize,
    /// TU dataset directory used instead of the synthetic task.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl TaskArgs {
    fn load(&self) -> Result<TaskData> {
        let mut cfg = PipelineConfig::new(self.task_seed);
        cfg.n_graphs = self.n_graphs;
        cfg.dataset_dir = self.dataset.clone();
        Ok(load_task(&cfg)?)
    }
}

#[derive(Args)]
struct GenCarriersArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    m: usize,
    /// Bundle output path. The bundle is never written to stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    swap_start: usize,
    #[arg(long, default_value_t = 5)]
    swap_increment: usize,
    #[arg(long, default_value_t = 50)]
    swap_cap: usize,
    #[arg(long, default_value_t = 0.1)]
    ks_delta: f64,
    #[arg(long, default_value_t = 25.0)]
    size_percentile: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 1e-6)]
    alpha: f64,
    /// Mixing coefficient; estimated from `--bundle` when omitted there.
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Include the reference worked-example comparison.
    #[arg(long)]
    paper_compat: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Gcn,
    Gin,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "gin")]
    layer: LayerArg,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    head_hidden: usize,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Refuse `--beta` above this bound.
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.16)]
    carrier_fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log output path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 1e-6)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    rho0: f64,
    /// Fixed match threshold instead of the calibrated one.
    #[arg(long)]
    tau: Option<usize>,
}

impl ThresholdArgs {
    fn thresholds(&self, m: usize) -> Result<AuditThresholds> {
        Ok(match self.tau {
            Some(t) => AuditThresholds::with_tau(m, t, self.rho0),
            None => AuditThresholds::calibrate(m, self.alpha, self.rho0)?,
        })
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Prune,
    Finetune,
    Quantize,
    Kd,
    KdWm,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 0.5)]
    prune_fraction: f64,
    #[arg(long, default_value_t = 20)]
    ft_epochs: usize,
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    kd_retention: f64,
    #[arg(long, default_value_t = 100)]
    kd_full_epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Edited checkpoint output path.
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    /// Hitting-set instance in `p hs m q B` format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    theta_min: f64,
    /// Also run both exhaustive solvers and report their answers.
    #[arg(long)]
    solve: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McNullArgs {
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 1e-6)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    rho0: f64,
    /// Fixed threshold instead of the calibrated one.
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_graphs: usize,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 1e-6)]
    alpha: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Edits applied after verification.
    #[arg(long, value_enum, value_delimiter = ',')]
    attacks: Vec<KindArg>,
    #[arg(long, default_value_t = 100)]
    kd_full_epochs: usize,
    /// Skip the `beta = 0` control model.
    #[arg(long)]
    no_control: bool,
    #[arg(long)]
    paper_compat: bool,
}

fn hyper(m: &ModelArgs) -> Hyper {
    Hyper {
        layer_kind: match m.layer {
            LayerArg::Gcn => LayerKind::Gcn,
            LayerArg::Gin => LayerKind::Gin,
        },
        hidden_dim: m.hidden,
        layers: m.layers,
        head_hidden: m.head_hidden,
        ..Hyper::default()
    }
}

fn kind(k: KindArg) -> AttackKind {
    match k {
        KindArg::Prune => AttackKind::Prune,
        KindArg::Finetune => AttackKind::Finetune,
        KindArg::Quantize => AttackKind::Quantize,
        KindArg::Kd => AttackKind::Kd,
        KindArg::KdWm => AttackKind::KdWm,
    }
}

fn load_bundle(path: &Path) -> Result<CarrierBundle> {
    let b: CarrierBundle = load_json(path).with_context(|| format!("reading bundle {}", path.display()))?;
    b.validate()?;
    Ok(b)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Writes `value` to `out` when given, and always prints it.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        emit_report(value, p)?;
    }
    print!("{}", to_canonical_json(value)?);
    Ok(())
}

fn verdict(d: Decision) -> ExitCode {
    match d {
        Decision::Verified => ExitCode::SUCCESS,
        Decision::NotVerified => ExitCode::from(3),
    }
}

fn warn_on_task_mismatch(bundle: &CarrierBundle, task: &TaskData) {
    if task_hash_digest(&task.train_graphs()) != bundle.train_hash_set_digest {
        eprintln!("warning: task training split differs from the one the bundle was built on");
    }
}

fn gen_carriers(a: &GenCarriersArgs) -> Result<ExitCode> {
    if a.out.as_os_str() == "-" {
        bail!("refusing to write the bundle to stdout");
    }
    let task = a.task.load()?;
    let p = ProtocolParams {
        swap_start: a.swap_start,
        swap_increment: a.swap_increment,
        swap_cap: a.swap_cap,
        ks_delta: a.ks_delta,
        size_percentile: a.size_percentile,
        rng_seed: a.seed,
    };
    let b = build_bundle(&task.train_graphs(), a.m, &p)?;
    emit_report(&b, &a.out)?;
    let ones = b.key_bits.iter().filter(|&&x| x == 1).count();
    eprintln!("wrote {} carriers ({} key bits set, size cap {}) to {}", b.len(), ones, b.size_cap, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn calibrate(a: &CalibrateArgs) -> Result<ExitCode> {
    let (m, rho0) = match &a.bundle {
        Some(p) => {
            let b = load_bundle(p)?;
            let r = match a.rho0 {
                Some(r) => r,
                None => estimate_rho0(&b, None)?,
            };
            (b.len(), r)
        }
        None => (a.m, a.rho0.unwrap_or(0.0)),
    };
    emit(&CalibrationReport::new(m, a.alpha, rho0, a.paper_compat)?, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn embed_cmd(a: &EmbedArgs) -> Result<ExitCode> {
    let task = a.task.load()?;
    let bundle = load_bundle(&a.bundle)?;
    warn_on_task_mismatch(&bundle, &task);
    let h = Hyper { input_dim: task.feature_dim(), num_classes: task.num_classes.max(2), ..hyper(&a.model) };
    let model = Model::new(h, a.seed)?;
    let mut cfg = EmbedConfig {
        beta_wm: a.beta,
        beta_max: a.beta_max,
        epochs: a.epochs,
        batch_size: a.batch_size,
        carrier_batch_fraction: a.carrier_fraction,
        seed: a.seed,
        ..EmbedConfig::default()
    };
    cfg.adam.lr = a.lr;
    let (trained, log) = embed(model, &task, Some(&bundle), &cfg)?;
    trained.save(&a.out)?;
    if let Some(p) = &a.log {
        emit_report(&log, p)?;
    }
    if let Some(last) = log.epochs.last() {
        eprintln!("epoch {}: task loss {:.4}, wm loss {:.5}, WM-ACC {:.4}", last.epoch, last.task_loss, last.wm_loss, last.wm_acc);
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(a: &VerifyArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let bundle = load_bundle(&a.bundle)?;
    let report = verify(&model, &bundle, &a.thresholds.thresholds(bundle.len())?)?;
    emit(&report, a.out.as_deref())?;
    Ok(verdict(report.decision))
}

fn attack_cmd(a: &AttackArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let bundle = load_bundle(&a.bundle)?;
    let task = a.task.load()?;
    let spec = AttackSpec {
        kind: kind(a.kind),
        prune_fraction: a.prune_fraction,
        ft_epochs: a.ft_epochs,
        bits: a.bits,
        kd_temperature: a.temperature,
        kd_retention: a.kd_retention,
        seed: a.seed,
    };
    let ctx = AttackContext {
        exec: graphmark::Exec::default(),
        train: EmbedConfig { beta_wm: a.beta, seed: a.seed, ..EmbedConfig::default() },
        kd_full_epochs: a.kd_full_epochs,
        student_seed: a.seed,
    };
    let th = a.thresholds.thresholds(bundle.len())?;
    let (edited, result) = apply_attack(&ctx, &model, &task, &bundle, &th, &spec, None)?;
    if let Some(p) = &a.out_model {
        edited.save(p)?;
    }
    emit(&result, a.out.as_deref())?;
    Ok(verdict(result.report.decision))
}

#[derive(Serialize)]
struct ReduceReport {
    instance: graphmark::hardness::WmRemoveInstance,
    #[serde(skip_serializing_if = "Option::is_none")]
    hitting_set_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hitting_set_yes: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wm_remove_yes: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<graphmark::hardness::Certificate>,
}

fn reduce_cmd(a: &ReduceArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let hs = parse_dimacs(&text)?;
    let instance = reduce_hitting_set(&hs, a.theta_min)?;
    let mut r = ReduceReport { instance, hitting_set_min: None, hitting_set_yes: None, wm_remove_yes: None, certificate: None };
    if a.solve {
        let min = brute_force_hitting_set(&hs)?;
        let cert = brute_force_wm_remove(&r.instance)?;
        r.hitting_set_min = min;
        r.hitting_set_yes = Some(min.is_some_and(|k| k <= hs.budget));
        r.wm_remove_yes = Some(cert.is_some());
        r.certificate = cert;
    }
    emit(&r, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct McNullReport {
    m: usize,
    tau: usize,
    trials: u64,
    seed: u64,
    measured_alpha: f64,
    exact_tail: f64,
    mc_standard_error: f64,
}

fn mc_null_cmd(a: &McNullArgs) -> Result<ExitCode> {
    let tau = match a.tau {
        Some(t) => t,
        None => AuditThresholds::calibrate(a.m, a.alpha, a.rho0)?.tau,
    };
    if a.trials == 0 {
        bail!("--trials must be positive");
    }
    let measured = monte_carlo_null(a.m, tau, a.trials, a.seed);
    let exact = binomial_tail_half(a.m, tau);
    let r = McNullReport {
        m: a.m,
        tau,
        trials: a.trials,
        seed: a.seed,
        measured_alpha: measured,
        exact_tail: exact,
        mc_standard_error: (exact * (1.0 - exact) / a.trials as f64).sqrt(),
    };
    emit(&r, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn pipeline_cmd(a: &PipelineArgs) -> Result<ExitCode> {
    let mut cfg = PipelineConfig::new(a.seed);
    cfg.n_graphs = a.n_graphs;
    cfg.dataset_dir = a.dataset.clone();
    cfg.m = a.m;
    cfg.alpha = a.alpha;
    cfg.hyper = hyper(&a.model);
    cfg.embed.epochs = a.epochs;
    cfg.embed.beta_wm = a.beta;
    cfg.control = !a.no_control;
    cfg.kd_full_epochs = a.kd_full_epochs;
    cfg.paper_compat = a.paper_compat;
    cfg.attacks = a.attacks.iter().map(|&k| AttackSpec { seed: a.seed, ..AttackSpec::new(kind(k)) }).collect();
    let outcome = run_pipeline(&cfg, Some(&a.out))?;
    print!("{}", to_canonical_json(&outcome.summary)?);
    Ok(verdict(outcome.report.decision))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::GenCarriers(a) => gen_carriers(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Reduce(a) => reduce_cmd(a),
        Command::McNull(a) => mc_null_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
