//! Synthetic coupled robot-object benchmark: toy environments with
//! scripted experts, episode bookkeeping, prediction-quality metrics,
//! a training ablation harness, and an inference-cost probe.

pub mod ablate;
pub mod env;
pub mod metrics;
pub mod timing;

pub use ablate::{ablation_suite, ablation_variants, AblationReport, AblationRun, ABLATION_LABELS};
pub use env::{
    episode_csv, generate_demos, BenchError, DemoSpec, EnvKind, EpisodeResult, EpisodeSchedule,
    EvalFrame, ObsFamily, OccludeWindow, PerturbSpec, RawObs, StepLog, ToyEnv, DEFAULT_EPS_TASK,
    GOAL_FLOW_POINTS, OBJ_FLOW_POINTS, PIXELS_PER_UNIT,
};
pub use metrics::{
    bin_of, cosine_curve, curve_csv, curves_csv, domination_fraction, feature_points,
    feature_traces, point_traces, rmse_by_percentile, FeatureTrace, PercentileCurves, PointTrace,
    DEFAULT_BINS,
};
pub use timing::{timing_probe, TimingStats};
