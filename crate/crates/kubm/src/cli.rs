//! Command-line wiring: demonstrations -> training -> planning -> episodes
//! -> benchmark reports.
//!
//! Every subcommand that writes outputs also drops a `config.effective`
//! file next to them; reloading that file with `--config` reproduces the
//! run exactly. All randomness flows from `--seed`.

use crate::config::{Config, ConfigError};
use crate::flowcodec::{
    attach_flow_features, reconstruction_rmse, train_flow_ae, FlowCodec, FlowError,
    FlowTrainConfig,
};
use crate::koopman::{
    fit_poly_model, load_model, save_model, train, KoopmanModel, ModelError, OpsError,
    TrainConfig, TrainError,
};
use crate::lifting::LiftVariant;
use crate::planner::{
    calibrate_tau, execute_episode, plan, EpisodeConfig, ExecMode, MonitorMetric, PlanError,
    TriggerMode, TriggerPolicy,
};
use crate::synthbench::{
    ablation_suite, cosine_curve, curve_csv, curves_csv, domination_fraction, episode_csv,
    feature_traces, generate_demos, point_traces, rmse_by_percentile, timing_probe, BenchError,
    DemoSpec, EnvKind, EpisodeResult, EpisodeSchedule, ObsFamily, OccludeWindow, PerturbSpec,
    ToyEnv,
};
use crate::trajdata::{load_dataset, save_dataset, DataError, Dataset};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "kubm",
    version,
    about = "Koopman behavioral models: learn linear latent dynamics from demonstrations, plan by rollout, replan on monitoring triggers"
)]
pub struct Cli {
    /// Config file of `key = value` lines, applied before any flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master random seed; overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Print the version.
    Version,
    /// List every config key with its default and description.
    ConfigKeys,
    /// Summarize a demonstration file.
    Data(DataArgs),
    /// Train a model with the learned lifting on a demonstration file.
    Train(TrainArgs),
    /// Fit a model in closed form over a fixed polynomial dictionary.
    Edmd(EdmdArgs),
    /// Roll out a plan from an initial-condition file.
    Plan(PlanArgs),
    /// Execute episodes with a trained model on the toy environment.
    Run(RunArgs),
    /// Benchmark suites: demo generation, mixed runs, ablation, metrics.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Train or apply the flow autoencoder.
    #[command(subcommand, name = "flow-ae")]
    FlowAe(FlowCmd),
    /// Shorthand for `bench ablate`.
    Ablate(AblateArgs),
    /// Shorthand for `bench metrics`.
    Metrics(MetricsArgs),
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Generate expert demonstrations.
    Gen(BenchGenArgs),
    /// Run a mixed clean/noisy episode suite and its metric curves.
    Run(BenchRunArgs),
    /// Train the four-way initialization/learning-rate ablation.
    Ablate(AblateArgs),
    /// Recompute metric curves from a saved suite.
    Metrics(MetricsArgs),
}

#[derive(Debug, Subcommand)]
pub enum FlowCmd {
    /// Train the codec on every flow frame in a demonstration file.
    Train(FlowTrainArgs),
    /// Encode one flow frame (JSON list of 256 [u, v] points).
    Encode(FlowCodecArgs),
    /// Decode one 128-dim latent back to points.
    Decode(FlowCodecArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Demonstration file (JSON lines).
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Demonstration file (JSON lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for model.kubm, metrics/, config.effective.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub encoder_lr: Option<f64>,
    #[arg(long)]
    pub koopman_lr: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub psi_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EdmdArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ridge strength; 0 selects the pseudoinverse solution.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Dictionary variant: v1 | v2 | v3.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    /// JSON file with "action", "features" (or "flow_points"), "goal".
    #[arg(long)]
    pub init: PathBuf,
    /// Rollout horizon.
    #[arg(long)]
    pub horizon: usize,
    /// Output plan file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for episodes/, metrics/, suite.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Execution mode: open-loop | monitored.
    #[arg(long)]
    pub mode: Option<String>,
    /// Goal perturbation "step:distance" applied to every episode.
    #[arg(long)]
    pub perturb: Option<String>,
    /// Observation blackout "from:to" (inclusive steps).
    #[arg(long)]
    pub occlude: Option<String>,
    /// Executor noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Replan threshold; overrides `trigger.tau`.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchGenArgs {
    /// Output demonstration file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Task: linear-coupled | reach-grasp-move | pendulum-push.
    #[arg(long)]
    pub kind: Option<String>,
    /// Observation family: vector | flow.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Executor noise std for the noisy half of the suite.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also probe mean per-step query time.
    #[arg(long, default_value_t = false)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Suite file written by `run` or `bench run`.
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlowTrainArgs {
    /// Demonstration file whose flow frames form the training pool.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for codec.json, metrics/, config.effective.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FlowCodecArgs {
    /// Codec file written by `flow-ae train`.
    #[arg(long)]
    pub codec: PathBuf,
    /// Input JSON file: 256 [u, v] points for encode, 128 reals for decode.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    match &cli.cmd {
        Cmd::Version => {
            println!("kubm {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
        Cmd::ConfigKeys => {
            print!("{}", Config::describe());
            Ok(())
        }
        Cmd::Data(a) => cmd_data(a),
        Cmd::Train(a) => cmd_train(cfg, a),
        Cmd::Edmd(a) => cmd_edmd(cfg, a),
        Cmd::Plan(a) => cmd_plan(cfg, a),
        Cmd::Run(a) => cmd_run(cfg, a),
        Cmd::Bench(BenchCmd::Gen(a)) => cmd_bench_gen(cfg, a),
        Cmd::Bench(BenchCmd::Run(a)) => cmd_bench_run(cfg, a),
        Cmd::Bench(BenchCmd::Ablate(a)) | Cmd::Ablate(a) => cmd_ablate(cfg, a),
        Cmd::Bench(BenchCmd::Metrics(a)) | Cmd::Metrics(a) => cmd_metrics(cfg, a),
        Cmd::FlowAe(FlowCmd::Train(a)) => cmd_flow_train(cfg, a),
        Cmd::FlowAe(FlowCmd::Encode(a)) => cmd_flow_codec(a, true),
        Cmd::FlowAe(FlowCmd::Decode(a)) => cmd_flow_codec(a, false),
    }
}

fn set_override<T: ToString>(
    cfg: &mut Config,
    key: &str,
    value: &Option<T>,
) -> Result<(), ConfigError> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn env_kind(cfg: &Config) -> Result<EnvKind, CliError> {
    let s = cfg.get_str("env.kind");
    EnvKind::parse(s).ok_or_else(|| invalid(format!("env.kind {s:?} is not a known task")))
}

fn obs_family(cfg: &Config) -> Result<ObsFamily, CliError> {
    let s = cfg.get_str("env.family");
    ObsFamily::parse(s).ok_or_else(|| invalid(format!("env.family {s:?} is not a known family")))
}

fn train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig {
        encoder_lr: cfg.get_f64("train.encoder-lr")?,
        koopman_lr: cfg.get_f64("train.koopman-lr")?,
        horizon: cfg.get_usize("train.horizon")?,
        epochs: cfg.get_usize("train.epochs")?,
        batch_size: cfg.get_usize("train.batch-size")?,
        hidden: (
            cfg.get_usize("train.hidden0")?,
            cfg.get_usize("train.hidden1")?,
        ),
        psi_dim: cfg.get_usize("train.psi-dim")?,
        identity_init: cfg.get_bool("train.identity-init")?,
        detach_targets: cfg.get_bool("train.detach-targets")?,
        truncate_tail: cfg.get_bool("train.truncate-tail")?,
        clip_max_norm: cfg.get_f64("train.clip-norm")?,
        seed: cfg.get_u64("seed")?,
    })
}

fn flow_train_config(cfg: &Config) -> Result<FlowTrainConfig, CliError> {
    Ok(FlowTrainConfig {
        learning_rate: cfg.get_f64("flow.lr")?,
        lr_decay: cfg.get_f64("flow.lr-decay")?,
        epochs: cfg.get_usize("flow.epochs")?,
        batch_size: cfg.get_usize("flow.batch-size")?,
        seed: cfg.get_u64("seed")?,
    })
}

fn all_flow_frames(data: &Dataset) -> Vec<Vec<[f64; 2]>> {
    data.demos
        .iter()
        .flat_map(|d| d.flow_points.iter().flatten().cloned())
        .collect()
}

/// Loads demos and makes them trainable: flow datasets get a codec trained
/// on their frames and their features replaced by encodings, then every
/// demo is augmented with its initial frame.
fn prepare_dataset(
    cfg: &Config,
    path: &Path,
) -> Result<(Dataset, Option<FlowCodec>), CliError> {
    let mut data = load_dataset(path)?;
    let codec = if data.has_flow() {
        let frames = all_flow_frames(&data);
        let (codec, _) = train_flow_ae(&frames, &flow_train_config(cfg)?)?;
        attach_flow_features(&mut data, &codec)?;
        Some(codec)
    } else {
        None
    };
    data.augment_all()?;
    Ok((data, codec))
}

fn write_csv(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn train_curve_csv(model: &KoopmanModel) -> String {
    let mut out = String::from("epoch,loss,spectral_radius\n");
    if let Some(rec) = &model.train_record {
        for (e, (l, r)) in rec.loss_curve.iter().zip(&rec.spectral_curve).enumerate() {
            out.push_str(&format!("{e},{l},{r}\n"));
        }
    }
    out
}

fn cmd_data(a: &DataArgs) -> Result<(), CliError> {
    let data = load_dataset(&a.dataset)?;
    let lens: Vec<usize> = data.demos.iter().map(|d| d.len()).collect();
    let summary = json!({
        "demos": data.len(),
        "d_q": data.d_q(),
        "d_f": data.d_f(),
        "d_goal": data.d_goal(),
        "has_flow": data.has_flow(),
        "frames": lens.iter().sum::<usize>(),
        "min_len": lens.iter().min(),
        "max_len": lens.iter().max(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_train(mut cfg: Config, a: &TrainArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "train.epochs", &a.epochs)?;
    set_override(&mut cfg, "train.encoder-lr", &a.encoder_lr)?;
    set_override(&mut cfg, "train.koopman-lr", &a.koopman_lr)?;
    set_override(&mut cfg, "train.horizon", &a.horizon)?;
    set_override(&mut cfg, "train.batch-size", &a.batch_size)?;
    set_override(&mut cfg, "train.psi-dim", &a.psi_dim)?;

    let (data, codec) = prepare_dataset(&cfg, &a.dataset)?;
    let tc = train_config(&cfg)?;
    let mut model = train(&data, &tc)?;
    model.flow_codec = codec;

    fs::create_dir_all(&a.out)?;
    save_model(&a.out.join("model.kubm"), &model)?;
    write_csv(&a.out.join("metrics/train_curve.csv"), &train_curve_csv(&model))?;
    cfg.dump(&a.out)?;

    let rec = model.train_record.as_ref().unwrap();
    println!(
        "trained on {} demos: loss {:.6e} -> {:.6e}, spectral radius {:.4}, latent dim {}",
        data.len(),
        rec.loss_curve[0],
        rec.loss_curve.last().unwrap(),
        rec.spectral_curve.last().unwrap(),
        model.dims.d_z
    );
    println!("model written to {}", a.out.join("model.kubm").display());
    Ok(())
}

fn cmd_edmd(mut cfg: Config, a: &EdmdArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "edmd.ridge", &a.ridge)?;
    set_override(&mut cfg, "edmd.variant", &a.variant)?;
    set_override(&mut cfg, "train.horizon", &a.horizon)?;

    let variant = match cfg.get_str("edmd.variant") {
        "v1" => LiftVariant::V1,
        "v2" => LiftVariant::V2,
        "v3" => LiftVariant::V3,
        other => return Err(invalid(format!("edmd.variant {other:?} is not v1|v2|v3"))),
    };
    let (data, codec) = prepare_dataset(&cfg, &a.dataset)?;
    let mut model = fit_poly_model(
        &data,
        variant,
        cfg.get_f64("edmd.ridge")?,
        cfg.get_usize("train.horizon")?,
    )?;
    model.flow_codec = codec;

    fs::create_dir_all(&a.out)?;
    save_model(&a.out.join("model.kubm"), &model)?;
    cfg.dump(&a.out)?;
    println!(
        "closed-form fit over {} demos: latent dim {}, spectral radius {:.4}",
        data.len(),
        model.dims.d_z,
        model.spectral_radius()?
    );
    println!("model written to {}", a.out.join("model.kubm").display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct InitFile {
    action: Vec<f64>,
    #[serde(default)]
    features: Option<Vec<f64>>,
    #[serde(default)]
    flow_points: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    goal: Vec<f64>,
}

fn cmd_plan(cfg: Config, a: &PlanArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let init: InitFile = serde_json::from_str(&fs::read_to_string(&a.init)?)?;
    let phi = match (&init.features, &init.flow_points) {
        (Some(f), _) => f.clone(),
        (None, Some(points)) => {
            let codec = model
                .flow_codec
                .as_ref()
                .ok_or_else(|| invalid("init file has flow_points but the model has no codec"))?;
            codec.encode(points)?
        }
        (None, None) => {
            return Err(invalid("init file needs either 'features' or 'flow_points'"))
        }
    };
    let p = plan(&model, 0, &init.action, &phi, &init.goal, a.horizon)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&a.out, serde_json::to_string_pretty(&p)?)?;
    cfg.dump(a.out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "plan with {} steps (horizon {}) written to {}",
        p.len(),
        a.horizon,
        a.out.display()
    );
    Ok(())
}

fn resolve_metric(cfg: &Config, family: ObsFamily) -> Result<MonitorMetric, CliError> {
    match cfg.get_str("monitor.metric") {
        "auto" => Ok(match family {
            ObsFamily::Flow => MonitorMetric::FlowCentroid,
            ObsFamily::Vector => MonitorMetric::Cosine,
        }),
        other => MonitorMetric::parse(other)
            .ok_or_else(|| invalid(format!("monitor.metric {other:?} is not a known metric"))),
    }
}

fn trigger_policy(cfg: &Config, tau: f64) -> Result<TriggerPolicy, CliError> {
    let mode = match cfg.get_str("trigger.mode") {
        "absolute" => TriggerMode::Absolute,
        "jump" => TriggerMode::Jump {
            window: cfg.get_usize("trigger.window")?,
        },
        other => return Err(invalid(format!("trigger.mode {other:?} is not absolute|jump"))),
    };
    Ok(TriggerPolicy {
        tau,
        persistence: cfg.get_usize("trigger.persistence")?,
        mode,
    })
}

fn parse_pair(s: &str, what: &str) -> Result<(String, String), CliError> {
    s.split_once(':')
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .ok_or_else(|| invalid(format!("{what} must look like 'a:b', got {s:?}")))
}

struct EpisodeRunner {
    model: KoopmanModel,
    kind: EnvKind,
    family: ObsFamily,
    cfg: EpisodeConfig,
}

impl EpisodeRunner {
    fn new(cfg: &Config, model: KoopmanModel, mode: ExecMode, tau: f64) -> Result<Self, CliError> {
        let family = obs_family(cfg)?;
        if family == ObsFamily::Flow && model.flow_codec.is_none() {
            return Err(invalid(
                "env.family is flow but the model carries no flow codec",
            ));
        }
        Ok(Self {
            model,
            kind: env_kind(cfg)?,
            family,
            cfg: EpisodeConfig {
                steps: cfg.get_usize("env.steps")?,
                eps_task: cfg.get_f64("env.eps-task")?,
                mode,
                metric: resolve_metric(cfg, family)?,
                policy: trigger_policy(cfg, tau)?,
            },
        })
    }

    fn run_one(&self, env_seed: u64, schedule: &EpisodeSchedule) -> Result<EpisodeResult, CliError> {
        let mut env = ToyEnv::new(self.kind, self.family, env_seed);
        Ok(execute_episode(&self.model, &mut env, &self.cfg, schedule)?)
    }

    /// Nominal monitored episodes with an unreachable threshold, for
    /// threshold calibration.
    fn calibrate(&self, cfg: &Config) -> Result<f64, CliError> {
        let probe = Self {
            model: self.model.clone(),
            kind: self.kind,
            family: self.family,
            cfg: EpisodeConfig {
                mode: ExecMode::Monitored,
                policy: TriggerPolicy {
                    tau: f64::INFINITY,
                    ..self.cfg.policy
                },
                ..self.cfg
            },
        };
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.get_u64("seed")?.wrapping_add(0x7ca1));
        let mut nominal = Vec::with_capacity(10);
        for _ in 0..10 {
            nominal.push(probe.run_one(seeder.gen(), &EpisodeSchedule::default())?);
        }
        calibrate_tau(&nominal, cfg.get_f64("trigger.multiplier")?)
            .ok_or_else(|| invalid("calibration produced no monitoring errors"))
    }
}

fn resolve_tau(cfg: &Config, runner: &EpisodeRunner, mode: ExecMode) -> Result<f64, CliError> {
    let tau = cfg.get_f64("trigger.tau")?;
    if mode == ExecMode::OpenLoop {
        return Ok(tau.max(0.0));
    }
    if tau > 0.0 {
        return Ok(tau);
    }
    let calibrated = runner.calibrate(cfg)?;
    println!("calibrated trigger threshold: {calibrated:.6e}");
    Ok(calibrated)
}

fn write_suite(
    out: &Path,
    results: &[EpisodeResult],
    summary: &serde_json::Value,
) -> Result<(), CliError> {
    let episodes_dir = out.join("episodes");
    fs::create_dir_all(&episodes_dir)?;
    for (i, r) in results.iter().enumerate() {
        fs::write(episodes_dir.join(format!("ep_{i:03}.csv")), episode_csv(r))?;
    }
    let stripped: Vec<EpisodeResult> = results
        .iter()
        .map(|r| EpisodeResult {
            eval: r.eval.iter().map(|f| f.without_points()).collect(),
            ..r.clone()
        })
        .collect();
    fs::write(out.join("suite.json"), serde_json::to_string(&stripped)?)?;
    write_csv(
        &out.join("metrics/summary.json"),
        &serde_json::to_string_pretty(summary)?,
    )?;
    Ok(())
}

fn success_rate(results: &[EpisodeResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

fn cmd_run(mut cfg: Config, a: &RunArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "run.episodes", &a.episodes)?;
    set_override(&mut cfg, "run.mode", &a.mode)?;
    set_override(&mut cfg, "trigger.tau", &a.tau)?;

    let mode = ExecMode::parse(cfg.get_str("run.mode"))
        .ok_or_else(|| invalid(format!("run.mode {:?} is not a known mode", cfg.get_str("run.mode"))))?;
    let runner = EpisodeRunner::new(&cfg, load_model(&a.model)?, mode, 1.0)?;
    let tau = resolve_tau(&cfg, &runner, mode)?;
    let runner = EpisodeRunner {
        cfg: EpisodeConfig {
            policy: TriggerPolicy {
                tau,
                ..runner.cfg.policy
            },
            ..runner.cfg
        },
        ..runner
    };

    let perturb = a
        .perturb
        .as_deref()
        .map(|s| -> Result<(usize, f64), CliError> {
            let (step, dist) = parse_pair(s, "--perturb")?;
            Ok((
                step.parse().map_err(|_| invalid("--perturb step must be an integer"))?,
                dist.parse().map_err(|_| invalid("--perturb distance must be a number"))?,
            ))
        })
        .transpose()?;
    let occlude = a
        .occlude
        .as_deref()
        .map(|s| -> Result<OccludeWindow, CliError> {
            let (from, to) = parse_pair(s, "--occlude")?;
            Ok(OccludeWindow {
                from: from.parse().map_err(|_| invalid("--occlude bounds must be integers"))?,
                to: to.parse().map_err(|_| invalid("--occlude bounds must be integers"))?,
            })
        })
        .transpose()?;
    let noise = a.noise.unwrap_or(0.0);

    let n = cfg.get_usize("run.episodes")?;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.get_u64("seed")?);
    let mut results = Vec::with_capacity(n);
    for _ in 0..n {
        let env_seed: u64 = seeder.gen();
        let perturb_seed: u64 = seeder.gen();
        let noise_seed: u64 = seeder.gen();
        let schedule = EpisodeSchedule {
            perturb: perturb.map(|(step, distance)| PerturbSpec {
                step,
                distance,
                seed: perturb_seed,
            }),
            occlude,
            action_noise: noise,
            noise_seed,
        };
        results.push(runner.run_one(env_seed, &schedule)?);
    }

    let summary = json!({
        "episodes": n,
        "success_rate": success_rate(&results),
        "mean_replans": results.iter().map(|r| r.replan_count).sum::<usize>() as f64 / n.max(1) as f64,
        "mean_final_distance": results.iter().map(|r| r.final_distance).sum::<f64>() / n.max(1) as f64,
        "mode": runner.cfg.mode.name(),
        "metric": runner.cfg.metric.name(),
        "tau": tau,
        "perturb": a.perturb,
        "occlude": a.occlude,
        "noise": noise,
    });
    write_suite(&a.out, &results, &summary)?;
    cfg.dump(&a.out)?;
    println!(
        "{} episodes ({}): success rate {:.2}, outputs in {}",
        n,
        runner.cfg.mode.name(),
        success_rate(&results),
        a.out.display()
    );
    Ok(())
}

fn cmd_bench_gen(mut cfg: Config, a: &BenchGenArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "demos.count", &a.count)?;
    set_override(&mut cfg, "env.kind", &a.kind)?;
    set_override(&mut cfg, "env.family", &a.family)?;
    set_override(&mut cfg, "env.steps", &a.steps)?;

    let spec = DemoSpec {
        kind: env_kind(&cfg)?,
        family: obs_family(&cfg)?,
        count: cfg.get_usize("demos.count")?,
        steps: cfg.get_usize("env.steps")?,
        eps_task: cfg.get_f64("env.eps-task")?,
        seed: cfg.get_u64("seed")?,
    };
    let data = generate_demos(&spec)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&data, &a.out)?;
    cfg.dump(a.out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "{} expert demos of {} steps on {} ({}) written to {}",
        data.len(),
        spec.steps,
        spec.kind.name(),
        spec.family.name(),
        a.out.display()
    );
    Ok(())
}

fn cmd_bench_run(mut cfg: Config, a: &BenchRunArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "run.episodes", &a.episodes)?;
    set_override(&mut cfg, "run.noise", &a.noise)?;

    let runner = EpisodeRunner::new(&cfg, load_model(&a.model)?, ExecMode::Monitored, 1.0)?;
    let tau = resolve_tau(&cfg, &runner, ExecMode::Monitored)?;
    let runner = EpisodeRunner {
        cfg: EpisodeConfig {
            policy: TriggerPolicy {
                tau,
                ..runner.cfg.policy
            },
            ..runner.cfg
        },
        ..runner
    };

    let n = cfg.get_usize("run.episodes")?;
    let noise = cfg.get_f64("run.noise")?;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.get_u64("seed")?);
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let env_seed: u64 = seeder.gen();
        let noise_seed: u64 = seeder.gen();
        let schedule = EpisodeSchedule {
            action_noise: if i % 2 == 1 { noise } else { 0.0 },
            noise_seed,
            ..Default::default()
        };
        results.push(runner.run_one(env_seed, &schedule)?);
    }

    let bins = cfg.get_usize("metrics.bins")?;
    let curves = rmse_by_percentile(&point_traces(&results), bins)?;
    write_csv(&a.out.join("metrics/rmse_percentile.csv"), &curves_csv(&curves))?;
    let cosine = cosine_curve(&feature_traces(&results), bins)?;
    write_csv(&a.out.join("metrics/cosine_curve.csv"), &curve_csv("cosine", &cosine))?;

    let timing = if a.timing {
        let stats = timing_probe(&runner.model, 5, 2000)?;
        Some(json!({"mean_ms": stats.mean_ms, "std_ms": stats.std_ms, "queries": stats.queries}))
    } else {
        None
    };
    let summary = json!({
        "episodes": n,
        "success_rate": success_rate(&results),
        "noise": noise,
        "tau": tau,
        "domination_fraction": domination_fraction(&curves),
        "timing": timing,
    });
    write_suite(&a.out, &results, &summary)?;
    cfg.dump(&a.out)?;
    println!(
        "mixed suite of {} episodes: success rate {:.2}, outputs in {}",
        n,
        success_rate(&results),
        a.out.display()
    );
    Ok(())
}

fn cmd_ablate(mut cfg: Config, a: &AblateArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "train.epochs", &a.epochs)?;

    let (data, _) = prepare_dataset(&cfg, &a.dataset)?;
    let report = ablation_suite(&data, &train_config(&cfg)?)?;
    write_csv(&a.out.join("metrics/ablation.csv"), &report.csv())?;
    let summary = json!({
        "best": report.best_label(),
        "runs": report.runs.iter().map(|r| {
            let (lo, hi) = r.spectral_range();
            json!({
                "label": r.label,
                "final_loss": r.final_loss(),
                "spectral_min": lo,
                "spectral_max": hi,
            })
        }).collect::<Vec<_>>(),
    });
    write_csv(
        &a.out.join("metrics/summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    cfg.dump(&a.out)?;
    println!("ablation complete; lowest final loss: {}", report.best_label());
    Ok(())
}

fn cmd_metrics(cfg: Config, a: &MetricsArgs) -> Result<(), CliError> {
    let results: Vec<EpisodeResult> = serde_json::from_str(&fs::read_to_string(&a.suite)?)?;
    let bins = cfg.get_usize("metrics.bins")?;
    let curves = rmse_by_percentile(&point_traces(&results), bins)?;
    write_csv(&a.out.join("metrics/rmse_percentile.csv"), &curves_csv(&curves))?;
    let cosine = cosine_curve(&feature_traces(&results), bins)?;
    write_csv(&a.out.join("metrics/cosine_curve.csv"), &curve_csv("cosine", &cosine))?;
    let summary = json!({
        "episodes": results.len(),
        "success_rate": success_rate(&results),
        "domination_fraction": domination_fraction(&curves),
    });
    write_csv(
        &a.out.join("metrics/summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    cfg.dump(&a.out)?;
    println!("curves for {} episodes written to {}", results.len(), a.out.display());
    Ok(())
}

fn cmd_flow_train(mut cfg: Config, a: &FlowTrainArgs) -> Result<(), CliError> {
    set_override(&mut cfg, "flow.epochs", &a.epochs)?;

    let data = load_dataset(&a.dataset)?;
    let frames = all_flow_frames(&data);
    if frames.is_empty() {
        return Err(invalid("dataset has no flow frames"));
    }
    let (codec, record) = train_flow_ae(&frames, &flow_train_config(&cfg)?)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("codec.json"), serde_json::to_string_pretty(&codec)?)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in record.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{e},{l}\n"));
    }
    write_csv(&a.out.join("metrics/flow_loss.csv"), &curve)?;
    cfg.dump(&a.out)?;
    let rmse = reconstruction_rmse(&codec, &frames)?;
    println!(
        "codec trained on {} frames: reconstruction RMSE {:.4} px, written to {}",
        frames.len(),
        rmse,
        a.out.join("codec.json").display()
    );
    Ok(())
}

fn cmd_flow_codec(a: &FlowCodecArgs, encode: bool) -> Result<(), CliError> {
    let codec: FlowCodec = serde_json::from_str(&fs::read_to_string(&a.codec)?)?;
    let text = fs::read_to_string(&a.input)?;
    let out = if encode {
        let points: Vec<[f64; 2]> = serde_json::from_str(&text)?;
        serde_json::to_string(&codec.encode(&points)?)?
    } else {
        let latent: Vec<f64> = serde_json::from_str(&text)?;
        serde_json::to_string(&codec.decode(&latent)?)?
    };
    match &a.out {
        Some(path) => fs::write(path, out)?,
        None => println!("{out}"),
    }
    Ok(())
}
