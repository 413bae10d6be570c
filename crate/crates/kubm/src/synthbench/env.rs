//! Toy coupled robot-object environments and scripted experts.
//!
//! All three tasks share the same interface: a 2-D effector commanded by
//! absolute position, a 2-D object it manipulates, and a 2-D goal. Steps
//! are exact (no integration error) and fully deterministic, so demo
//! files are reproducible byte for byte and open-loop execution is a pure
//! function of the initial state.
//!
//! Observations come in two families. The vector family reports
//! `[object, goal]` directly. The flow family reports 256 tracked points
//! in pixel coordinates: 192 on a disc riding the object and 64 on a
//! marker riding the goal, both advected rigidly from one canonical
//! layout, which makes ground-truth flow exact without any tracker.

use crate::trajdata::{Dataset, Demonstration, FLOW_POINT_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OBJ_FLOW_POINTS: usize = 192;
pub const GOAL_FLOW_POINTS: usize = 64;
/// Pixel scale of the unit workspace for flow observations.
pub const PIXELS_PER_UNIT: f64 = 128.0;
/// Success radius: an episode succeeds when the object ends within this
/// distance of the goal, in workspace units.
pub const DEFAULT_EPS_TASK: f64 = 0.05;

/// Seed for the one canonical flow layout shared by every episode.
const LAYOUT_SEED: u64 = 0xf10a;
const OBJ_DISC_RADIUS_PX: f64 = 10.0;
const GOAL_MARKER_RADIUS_PX: f64 = 5.0;

/// Coupling rate of the linear-coupled object toward the effector.
const COUPLE_ALPHA: f64 = 0.2;
/// Expert blend toward the goal on the linear-coupled task.
const COUPLE_BETA: f64 = 0.15;

/// Reach-grasp-move expert gains and grasp radius. The expert follows one
/// law in both phases, `a' = ee + k_r (obj - ee) + k_t (goal - obj)`;
/// after attachment the first term vanishes because the grasp centers the
/// object on the effector.
const REACH_GAIN: f64 = 0.55;
const TRANSPORT_GAIN: f64 = 0.08;
const GRASP_RADIUS: f64 = 0.2;

const PEND_CENTER: [f64; 2] = [0.5, 0.5];
const PEND_RADIUS: f64 = 0.3;
/// Fraction of the commanded tangential offset converted into angle change.
const PEND_GAIN: f64 = 0.5;
const PEND_CONTACT_RADIUS: f64 = 0.15;
const PEND_MAX_STEP: f64 = 0.2;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("scripted expert failed to produce a successful demo after {attempts} attempts on {kind}")]
    ExpertFailed { kind: &'static str, attempts: usize },
    #[error("{0}")]
    BadSpec(String),
    #[error("cosine metric undefined on a zero-norm feature")]
    DegenerateCosine,
    #[error(transparent)]
    Data(#[from] crate::trajdata::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    LinearCoupled,
    ReachGraspMove,
    PendulumPush,
}

impl EnvKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear-coupled" => Some(Self::LinearCoupled),
            "reach-grasp-move" => Some(Self::ReachGraspMove),
            "pendulum-push" => Some(Self::PendulumPush),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LinearCoupled => "linear-coupled",
            Self::ReachGraspMove => "reach-grasp-move",
            Self::PendulumPush => "pendulum-push",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsFamily {
    Vector,
    Flow,
}

impl ObsFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vector" => Some(Self::Vector),
            "flow" => Some(Self::Flow),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Vector => "vector",
            Self::Flow => "flow",
        }
    }
}

/// One raw observation, before any feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub enum RawObs {
    Vector(Vec<f64>),
    Flow(Vec<[f64; 2]>),
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)]
}

/// Uniform points on a disc of the given radius, in pixels.
fn disc_layout(rng: &mut ChaCha8Rng, count: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..count)
        .map(|_| {
            let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    if x < -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub kind: EnvKind,
    pub family: ObsFamily,
    ee: [f64; 2],
    obj: [f64; 2],
    goal: [f64; 2],
    attached: bool,
    /// Pendulum angle; `obj` mirrors the tip position.
    theta: f64,
    goal_theta: f64,
    obj_layout: Vec<[f64; 2]>,
    goal_layout: Vec<[f64; 2]>,
}

impl ToyEnv {
    /// Fresh episode with seeded random initial poses. The flow layouts are
    /// canonical (shared across all episodes), only positions vary.
    pub fn new(kind: EnvKind, family: ObsFamily, seed: u64) -> Self {
        let mut layout_rng = ChaCha8Rng::seed_from_u64(LAYOUT_SEED);
        let obj_layout = disc_layout(&mut layout_rng, OBJ_FLOW_POINTS, OBJ_DISC_RADIUS_PX);
        let goal_layout = disc_layout(&mut layout_rng, GOAL_FLOW_POINTS, GOAL_MARKER_RADIUS_PX);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ee, obj, goal, theta, goal_theta) = match kind {
            EnvKind::PendulumPush => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut goal_theta = theta;
                while wrap_angle(goal_theta - theta).abs() < 0.8 {
                    goal_theta = rng.gen_range(0.0..std::f64::consts::TAU);
                }
                let tip = Self::tip_at(theta);
                let goal = Self::tip_at(goal_theta);
                (tip, tip, goal, theta, goal_theta)
            }
            _ => {
                let ee = sample_point(&mut rng);
                let mut obj = sample_point(&mut rng);
                while dist(obj, ee) < 0.2 {
                    obj = sample_point(&mut rng);
                }
                let mut goal = sample_point(&mut rng);
                while dist(goal, obj) < 0.3 {
                    goal = sample_point(&mut rng);
                }
                (ee, obj, goal, 0.0, 0.0)
            }
        };
        Self {
            kind,
            family,
            ee,
            obj,
            goal,
            attached: false,
            theta,
            goal_theta,
            obj_layout,
            goal_layout,
        }
    }

    fn tip_at(theta: f64) -> [f64; 2] {
        [
            PEND_CENTER[0] + PEND_RADIUS * theta.cos(),
            PEND_CENTER[1] + PEND_RADIUS * theta.sin(),
        ]
    }

    pub fn effector(&self) -> [f64; 2] {
        self.ee
    }

    pub fn object(&self) -> [f64; 2] {
        self.obj
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }

    /// Initial joint configuration, the action-space value of the current
    /// effector pose.
    pub fn joints(&self) -> Vec<f64> {
        self.ee.to_vec()
    }

    pub fn object_goal_distance(&self) -> f64 {
        dist(self.obj, self.goal)
    }

    /// Moves the goal. On the pendulum task the point is projected back
    /// onto the reachable circle.
    pub fn set_goal(&mut self, goal: [f64; 2]) {
        match self.kind {
            EnvKind::PendulumPush => {
                let angle = (goal[1] - PEND_CENTER[1]).atan2(goal[0] - PEND_CENTER[0]);
                self.goal_theta = angle;
                self.goal = Self::tip_at(angle);
            }
            _ => self.goal = goal,
        }
    }

    /// Executes one action exactly. Deterministic.
    pub fn step(&mut self, action: &[f64]) {
        assert_eq!(action.len(), 2, "actions are 2-D effector targets");
        let target = [action[0], action[1]];
        match self.kind {
            EnvKind::LinearCoupled => {
                self.ee = target;
                self.obj = [
                    self.obj[0] + COUPLE_ALPHA * (self.ee[0] - self.obj[0]),
                    self.obj[1] + COUPLE_ALPHA * (self.ee[1] - self.obj[1]),
                ];
            }
            EnvKind::ReachGraspMove => {
                let delta = [target[0] - self.ee[0], target[1] - self.ee[1]];
                self.ee = target;
                if self.attached {
                    self.obj = [self.obj[0] + delta[0], self.obj[1] + delta[1]];
                } else if dist(self.ee, self.obj) <= GRASP_RADIUS {
                    // The grasp centers the object on the effector.
                    self.attached = true;
                    self.obj = self.ee;
                }
            }
            EnvKind::PendulumPush => {
                self.ee = target;
                let tip = Self::tip_at(self.theta);
                if dist(self.ee, tip) <= PEND_CONTACT_RADIUS {
                    let tangent = [-self.theta.sin(), self.theta.cos()];
                    let push = (self.ee[0] - tip[0]) * tangent[0]
                        + (self.ee[1] - tip[1]) * tangent[1];
                    let dtheta = (PEND_GAIN * push / PEND_RADIUS)
                        .clamp(-PEND_MAX_STEP, PEND_MAX_STEP);
                    self.theta += dtheta;
                }
                self.obj = Self::tip_at(self.theta);
            }
        }
    }

    /// The feature vector the vector family observes: `[object, goal]`.
    pub fn feature_vector(&self) -> Vec<f64> {
        vec![self.obj[0], self.obj[1], self.goal[0], self.goal[1]]
    }

    /// The 256 tracked points the flow family observes, in pixels.
    pub fn flow_frame(&self) -> Vec<[f64; 2]> {
        let mut points = Vec::with_capacity(FLOW_POINT_COUNT);
        for p in &self.obj_layout {
            points.push([
                self.obj[0] * PIXELS_PER_UNIT + p[0],
                self.obj[1] * PIXELS_PER_UNIT + p[1],
            ]);
        }
        for p in &self.goal_layout {
            points.push([
                self.goal[0] * PIXELS_PER_UNIT + p[0],
                self.goal[1] * PIXELS_PER_UNIT + p[1],
            ]);
        }
        points
    }

    pub fn raw_observation(&self) -> RawObs {
        match self.family {
            ObsFamily::Vector => RawObs::Vector(self.feature_vector()),
            ObsFamily::Flow => RawObs::Flow(self.flow_frame()),
        }
    }

    /// Scripted expert command for the current state.
    pub fn expert_action(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::LinearCoupled => vec![
                (1.0 - COUPLE_BETA) * self.ee[0] + COUPLE_BETA * self.goal[0],
                (1.0 - COUPLE_BETA) * self.ee[1] + COUPLE_BETA * self.goal[1],
            ],
            EnvKind::ReachGraspMove => vec![
                self.ee[0]
                    + REACH_GAIN * (self.obj[0] - self.ee[0])
                    + TRANSPORT_GAIN * (self.goal[0] - self.obj[0]),
                self.ee[1]
                    + REACH_GAIN * (self.obj[1] - self.ee[1])
                    + TRANSPORT_GAIN * (self.goal[1] - self.obj[1]),
            ],
            EnvKind::PendulumPush => {
                let tip = Self::tip_at(self.theta);
                let want = wrap_angle(self.goal_theta - self.theta)
                    .clamp(-0.15, 0.15);
                let tangent = [-self.theta.sin(), self.theta.cos()];
                let offset = want * PEND_RADIUS / PEND_GAIN;
                vec![tip[0] + offset * tangent[0], tip[1] + offset * tangent[1]]
            }
        }
    }
}

/// Demo-generation request.
#[derive(Debug, Clone, Copy)]
pub struct DemoSpec {
    pub kind: EnvKind,
    pub family: ObsFamily,
    pub count: usize,
    pub steps: usize,
    pub eps_task: f64,
    pub seed: u64,
}

const EXPERT_ATTEMPTS_PER_DEMO: usize = 50;

/// Runs the scripted expert until it has produced `count` successful
/// demonstrations, resampling failed initial configurations. Demos carry
/// the goal; the flow family additionally carries flow frames (with the
/// object and goal positions as a placeholder feature vector, replaced by
/// codec encodings before training).
pub fn generate_demos(spec: &DemoSpec) -> Result<Dataset, BenchError> {
    if spec.count == 0 {
        return Err(BenchError::BadSpec("demo count must be at least 1".into()));
    }
    if spec.steps == 0 {
        return Err(BenchError::BadSpec("demo steps must be at least 1".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut demos = Vec::with_capacity(spec.count);
    while demos.len() < spec.count {
        let mut attempts = 0;
        let demo = loop {
            attempts += 1;
            if attempts > EXPERT_ATTEMPTS_PER_DEMO {
                return Err(BenchError::ExpertFailed {
                    kind: spec.kind.name(),
                    attempts,
                });
            }
            let env_seed: u64 = master.gen();
            if let Some(demo) = run_expert(spec, env_seed) {
                break demo;
            }
        };
        demos.push(demo);
    }
    Ok(Dataset::new(demos)?)
}

fn run_expert(spec: &DemoSpec, env_seed: u64) -> Option<Demonstration> {
    let mut env = ToyEnv::new(spec.kind, spec.family, env_seed);
    let initial_joints = env.joints();
    let goal = env.goal().to_vec();
    let mut actions = Vec::with_capacity(spec.steps);
    let mut features = Vec::with_capacity(spec.steps);
    let mut flow = Vec::with_capacity(spec.steps);
    for _ in 0..spec.steps {
        let a = env.expert_action();
        env.step(&a);
        actions.push(a);
        features.push(env.feature_vector());
        if spec.family == ObsFamily::Flow {
            flow.push(env.flow_frame());
        }
    }
    if env.object_goal_distance() >= spec.eps_task {
        return None;
    }
    let flow_points = (spec.family == ObsFamily::Flow).then_some(flow);
    Some(Demonstration::new(
        initial_joints,
        actions,
        features,
        flow_points,
        Some(goal),
    ))
}

/// Goal perturbation: at `step`, the goal jumps to a point at least
/// `distance` away, sampled deterministically from `seed`. Distance zero
/// means no perturbation at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub step: usize,
    pub distance: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn is_noop(&self) -> bool {
        self.distance == 0.0
    }

    /// The perturbed goal for an environment currently at `old`. Pure and
    /// deterministic; the caller applies it via [`ToyEnv::set_goal`].
    pub fn sample_goal(&self, old: [f64; 2]) -> [f64; 2] {
        if self.is_noop() {
            return old;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for _ in 0..200 {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = self.distance * rng.gen_range(1.0..1.3);
            let cand = [old[0] + r * angle.cos(), old[1] + r * angle.sin()];
            if (0.05..=0.95).contains(&cand[0]) && (0.05..=0.95).contains(&cand[1]) {
                return cand;
            }
        }
        // A distance this large cannot stay inside the workspace from any
        // corner; fall back to the far corner.
        let corner = [
            if old[0] < 0.5 { 0.95 } else { 0.05 },
            if old[1] < 0.5 { 0.95 } else { 0.05 },
        ];
        corner
    }
}

/// Observation blackout over an inclusive window of observation times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccludeWindow {
    pub from: usize,
    pub to: usize,
}

impl OccludeWindow {
    pub fn covers(&self, t: usize) -> bool {
        t >= self.from && t <= self.to
    }
}

/// Everything that can be injected into one episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSchedule {
    pub perturb: Option<PerturbSpec>,
    pub occlude: Option<OccludeWindow>,
    /// Standard deviation of executor noise added to commanded actions.
    pub action_noise: f64,
    pub noise_seed: u64,
}

impl EpisodeSchedule {
    pub fn occluded_at(&self, t: usize) -> bool {
        self.occlude.is_some_and(|w| w.covers(t))
    }
}

/// One executed step, as written to episode CSV logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Commanded action (before executor noise).
    pub action: Vec<f64>,
    /// Monitoring error, absent in open-loop mode and on occluded frames.
    pub monitor_error: Option<f64>,
    pub triggered: bool,
    pub replanned: bool,
    pub object_goal_distance: f64,
}

/// Per-step prediction telemetry kept for metric suites. Never feeds
/// back into execution. Point telemetry can be large and is dropped from
/// saved suites; absent fields deserialize as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub pred_feature: Vec<f64>,
    /// Observed feature, absent on occluded frames.
    pub obs_feature: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pred_points: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub true_points: Option<Vec<[f64; 2]>>,
}

impl EvalFrame {
    /// Telemetry without the bulky point sets, for on-disk suites.
    pub fn without_points(&self) -> Self {
        Self {
            pred_feature: self.pred_feature.clone(),
            obs_feature: self.obs_feature.clone(),
            pred_points: None,
            true_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
    pub replan_count: usize,
    pub logs: Vec<StepLog>,
    pub eval: Vec<EvalFrame>,
}

impl EpisodeResult {
    /// Success recomputed from the logs alone, for audit.
    pub fn success_from_logs(&self, eps_task: f64) -> bool {
        self.logs
            .last()
            .map(|l| l.object_goal_distance < eps_task)
            .unwrap_or(false)
    }
}

/// CSV rendering of an episode's step logs.
pub fn episode_csv(result: &EpisodeResult) -> String {
    let d_q = result.logs.first().map_or(0, |l| l.action.len());
    let mut out = String::from("step");
    for i in 0..d_q {
        out.push_str(&format!(",action_{i}"));
    }
    out.push_str(",predicted_feature_error,triggered,replanned,object_goal_distance\n");
    for log in &result.logs {
        out.push_str(&log.step.to_string());
        for a in &log.action {
            out.push_str(&format!(",{a}"));
        }
        match log.monitor_error {
            Some(e) => out.push_str(&format!(",{e}")),
            None => out.push(','),
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            log.triggered as u8, log.replanned as u8, log.object_goal_distance
        ));
    }
    out
}
