//! Implicit planning by latent rollout, with runtime monitoring and
//! event-triggered replanning.
//!
//! A plan is one open-loop rollout of the learned transition matrix from
//! an encoded initial condition. The action trajectory is read directly
//! off the latent sequence, so planning costs one matrix-vector multiply
//! per step and no optimization. During execution the predicted features
//! are compared against observations; when the error exceeds a trigger
//! policy the current observation is re-encoded as a fresh initial
//! condition and the remaining horizon is re-rolled.

use crate::flowcodec::{FlowCodec, FlowError};
use crate::koopman::{KoopmanModel, ModelError};
use crate::synthbench::env::{
    EpisodeResult, EpisodeSchedule, EvalFrame, ObsFamily, StepLog, ToyEnv,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cosine monitoring is undefined on a zero-norm feature")]
    DegenerateCosine,
    #[error("flow-centroid monitoring needs a model with a flow codec")]
    MissingCodec,
    #[error("predicted feature has length {pred}, observed has {obs}")]
    FeatureMismatch { pred: usize, obs: usize },
    #[error("plan created at step {origin} cannot serve step {step}")]
    PlanExhausted { origin: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// One open-loop plan: the latent rollout, the actions read off it, and
/// the predicted features (back in raw units) for monitoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    /// Global step at which the plan was created; entry `i` describes
    /// global step `origin_step + i`.
    pub origin_step: usize,
    pub latents: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl Plan {
    /// Number of entries, horizon + 1.
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// The command for the transition into global step `step`.
    pub fn action_at(&self, step: usize) -> Result<&[f64], PlanError> {
        self.index_of(step).map(|i| self.actions[i].as_slice())
    }

    /// The predicted features at global step `step`.
    pub fn features_at(&self, step: usize) -> Result<&[f64], PlanError> {
        self.index_of(step).map(|i| self.features[i].as_slice())
    }

    fn index_of(&self, step: usize) -> Result<usize, PlanError> {
        let exhausted = PlanError::PlanExhausted {
            origin: self.origin_step,
            step,
        };
        let i = step.checked_sub(self.origin_step).ok_or(exhausted)?;
        if i >= self.len() {
            return Err(PlanError::PlanExhausted {
                origin: self.origin_step,
                step,
            });
        }
        Ok(i)
    }
}

/// Latent rollout: `z_0 = z0`, `z_{t+1} = K z_t`, `horizon + 1` entries.
pub fn rollout(
    model: &KoopmanModel,
    z0: &[f64],
    horizon: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(z0.to_vec());
    for _ in 0..horizon {
        let next = model.step_latent(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Builds a plan from the current configuration `a0`, observed features
/// `phi0`, and goal, rolling the model `horizon` steps ahead.
pub fn plan(
    model: &KoopmanModel,
    origin_step: usize,
    a0: &[f64],
    phi0: &[f64],
    goal: &[f64],
    horizon: usize,
) -> Result<Plan, PlanError> {
    let z0 = model.encode_state(a0, phi0, goal)?;
    let latents = rollout(model, &z0, horizon)?;
    let mut actions = Vec::with_capacity(latents.len());
    let mut features = Vec::with_capacity(latents.len());
    for z in &latents {
        actions.push(model.action_of(z)?.to_vec());
        features.push(model.features_of(z)?);
    }
    Ok(Plan {
        origin_step,
        latents,
        actions,
        features,
    })
}

/// Replanning is planning from the live observation: the last commanded
/// action and the current features become a fresh initial condition and
/// the remaining task horizon is re-rolled. The caller switches to the
/// returned plan at the next step.
pub fn replan(
    model: &KoopmanModel,
    origin_step: usize,
    last_action: &[f64],
    phi_obs: &[f64],
    goal: &[f64],
    remaining: usize,
) -> Result<Plan, PlanError> {
    plan(model, origin_step, last_action, phi_obs, goal, remaining)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonitorMetric {
    FlowCentroid,
    Cosine,
}

impl MonitorMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flow-centroid" => Some(Self::FlowCentroid),
            "cosine" => Some(Self::Cosine),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FlowCentroid => "flow-centroid",
            Self::Cosine => "cosine",
        }
    }
}

/// Euclidean distance between the centroids of two point sets.
pub fn centroid_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mean = |pts: &[[f64; 2]]| {
        let n = pts.len().max(1) as f64;
        let (sx, sy) = pts
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    };
    let (ca, cb) = (mean(a), mean(b));
    ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt()
}

/// Monitoring error between a predicted and an observed feature vector.
///
/// Flow-centroid decodes both through the codec and measures centroid
/// displacement in pixels. Cosine measures `1 - cos(pred, obs)` and is
/// undefined on zero-norm inputs.
pub fn monitor_step(
    pred: &[f64],
    obs: &[f64],
    metric: MonitorMetric,
    codec: Option<&FlowCodec>,
) -> Result<f64, PlanError> {
    if pred.len() != obs.len() {
        return Err(PlanError::FeatureMismatch {
            pred: pred.len(),
            obs: obs.len(),
        });
    }
    match metric {
        MonitorMetric::FlowCentroid => {
            let codec = codec.ok_or(PlanError::MissingCodec)?;
            let p = codec.decode(pred)?;
            let o = codec.decode(obs)?;
            Ok(centroid_distance(&p, &o))
        }
        MonitorMetric::Cosine => {
            let dot: f64 = pred.iter().zip(obs).map(|(a, b)| a * b).sum();
            let np: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
            let no: f64 = obs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np == 0.0 || no == 0.0 {
                return Err(PlanError::DegenerateCosine);
            }
            Ok(1.0 - dot / (np * no))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TriggerMode {
    /// Last `persistence` errors all above the threshold.
    Absolute,
    /// Latest error minus the median of the previous `window` errors
    /// above the threshold.
    Jump { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerPolicy {
    pub tau: f64,
    pub persistence: usize,
    pub mode: TriggerMode,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        Self {
            tau: 1.0,
            persistence: 2,
            mode: TriggerMode::Absolute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub step: usize,
    pub error: f64,
    pub triggered: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Whether the monitor history demands a replan. Strictly monotone in the
/// threshold: raising `tau` never turns a false into a true.
pub fn check_trigger(history: &[MonitorRecord], policy: &TriggerPolicy) -> bool {
    match policy.mode {
        TriggerMode::Absolute => {
            let m = policy.persistence.max(1);
            history.len() >= m
                && history[history.len() - m..]
                    .iter()
                    .all(|r| r.error > policy.tau)
        }
        TriggerMode::Jump { window } => {
            let w = window.max(1);
            if history.len() < w + 1 {
                return false;
            }
            let latest = history[history.len() - 1].error;
            let mut prev: Vec<f64> = history[history.len() - 1 - w..history.len() - 1]
                .iter()
                .map(|r| r.error)
                .collect();
            latest - median(&mut prev) > policy.tau
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    OpenLoop,
    Monitored,
}

impl ExecMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open-loop" => Some(Self::OpenLoop),
            "monitored" => Some(Self::Monitored),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OpenLoop => "open-loop",
            Self::Monitored => "monitored",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Task horizon: number of executed transitions.
    pub steps: usize,
    /// Success radius on the final object-goal distance.
    pub eps_task: f64,
    pub mode: ExecMode,
    pub metric: MonitorMetric,
    pub policy: TriggerPolicy,
}

/// The feature vector the model would have been trained on for the
/// current environment state.
fn observed_feature(model: &KoopmanModel, env: &ToyEnv) -> Result<Vec<f64>, PlanError> {
    match env.family {
        ObsFamily::Vector => Ok(env.feature_vector()),
        ObsFamily::Flow => {
            let codec = model.flow_codec.as_ref().ok_or(PlanError::MissingCodec)?;
            Ok(codec.encode(&env.flow_frame())?)
        }
    }
}

fn goal_vector(model: &KoopmanModel, env: &ToyEnv) -> Vec<f64> {
    if model.dims.d_g == 0 {
        Vec::new()
    } else {
        env.goal().to_vec()
    }
}

/// Runs one episode.
///
/// Open-loop mode commits to the initial plan: observations are recorded
/// as telemetry but cannot influence a single executed action. Monitored
/// mode compares predictions against observations each step (skipping
/// blacked-out frames), and on a trigger re-encodes the live state and
/// replans the remaining horizon, switching plans at the next step.
pub fn execute_episode(
    model: &KoopmanModel,
    env: &mut ToyEnv,
    cfg: &EpisodeConfig,
    schedule: &EpisodeSchedule,
) -> Result<EpisodeResult, PlanError> {
    let a0 = env.joints();
    let phi0 = observed_feature(model, env)?;
    let goal = goal_vector(model, env);
    let mut current = plan(model, 0, &a0, &phi0, &goal, cfg.steps)?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(schedule.noise_seed);
    let mut history: Vec<MonitorRecord> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.steps);
    let mut eval = Vec::with_capacity(cfg.steps);
    let mut replan_count = 0usize;

    for t in 0..cfg.steps {
        let cmd = current.action_at(t + 1)?.to_vec();

        if let Some(p) = schedule.perturb {
            if p.step == t && !p.is_noop() {
                env.set_goal(p.sample_goal(env.goal()));
            }
        }

        let executed = if schedule.action_noise > 0.0 {
            // Uniform executor noise with the requested standard deviation.
            let half = schedule.action_noise * 3.0f64.sqrt();
            cmd.iter()
                .map(|v| v + noise_rng.gen_range(-half..half))
                .collect()
        } else {
            cmd.clone()
        };
        env.step(&executed);

        let now = t + 1;
        let occluded = schedule.occluded_at(now);
        let pred_feature = current.features_at(now)?.to_vec();
        let obs_feature = if occluded {
            None
        } else {
            Some(observed_feature(model, env)?)
        };

        let mut monitor_error = None;
        let mut triggered = false;
        let mut replanned = false;
        if cfg.mode == ExecMode::Monitored {
            if let Some(obs) = &obs_feature {
                let err = monitor_step(
                    &pred_feature,
                    obs,
                    cfg.metric,
                    model.flow_codec.as_ref(),
                )?;
                history.push(MonitorRecord {
                    step: now,
                    error: err,
                    triggered: false,
                });
                triggered = check_trigger(&history, &cfg.policy);
                history.last_mut().unwrap().triggered = triggered;
                monitor_error = Some(err);
                if triggered && now < cfg.steps {
                    let goal = goal_vector(model, env);
                    current = replan(model, now, &cmd, obs, &goal, cfg.steps - now)?;
                    // Errors against the retired plan would re-trigger
                    // immediately; the new plan starts with a clean window.
                    history.clear();
                    replanned = true;
                    replan_count += 1;
                }
            }
        }

        let (pred_points, true_points) = match (env.family, model.flow_codec.as_ref()) {
            (ObsFamily::Flow, Some(codec)) => (
                Some(codec.decode(&pred_feature)?),
                (!occluded).then(|| env.flow_frame()),
            ),
            _ => (None, None),
        };
        eval.push(EvalFrame {
            pred_feature,
            obs_feature,
            pred_points,
            true_points,
        });
        logs.push(StepLog {
            step: now,
            action: cmd,
            monitor_error,
            triggered,
            replanned,
            object_goal_distance: env.object_goal_distance(),
        });
    }

    let final_distance = env.object_goal_distance();
    Ok(EpisodeResult {
        success: final_distance < cfg.eps_task,
        steps: cfg.steps,
        final_distance,
        replan_count,
        logs,
        eval,
    })
}

/// Threshold calibration: `multiplier` times the 95th percentile
/// (nearest-rank) of all monitoring errors seen in nominal episodes.
pub fn calibrate_tau(results: &[EpisodeResult], multiplier: f64) -> Option<f64> {
    let mut errs: Vec<f64> = results
        .iter()
        .flat_map(|r| r.logs.iter().filter_map(|l| l.monitor_error))
        .collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(f64::total_cmp);
    let rank = ((0.95 * errs.len() as f64).ceil() as usize).clamp(1, errs.len());
    Some(multiplier * errs[rank - 1])
}
