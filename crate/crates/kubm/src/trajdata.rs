//! Demonstration trajectories and the behavioral-state view over them.
//!
//! # File format
//!
//! Datasets are UTF-8 JSONL: one JSON object per demonstration with keys
//!
//! - `initial_joints`: the robot configuration before the first command
//!   (`d_q` reals)
//! - `actions`: `T x d_q` commanded joint targets
//! - `features`: `T x d_f` per-frame visual feature vectors
//! - `flow_points` (optional): `T x 256 x 2` tracked points in pixels
//! - `goal` (optional): a fixed goal feature for the whole demonstration
//!
//! Demonstrations are stored unaugmented. [`Demonstration::augment_initial`]
//! prepends a frame in memory: the initial joint configuration becomes
//! action zero and the first feature frame is duplicated, which gives the
//! lifted dynamics a consistent state at time zero. Augmenting twice is an
//! error, and augmented demos refuse to serialize.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Every flow frame carries exactly this many tracked points.
pub const FLOW_POINT_COUNT: usize = 256;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset holds no demonstrations")]
    EmptyDataset,
    #[error("demo {demo}: {detail}")]
    Malformed { demo: usize, detail: String },
    #[error("demo {demo} is already augmented")]
    AlreadyAugmented { demo: usize },
    #[error("augmented demonstrations cannot be serialized; save before augmenting")]
    SaveAugmented,
    #[error("rescale is undefined: mean feature norm is zero")]
    DegenerateFeatures,
    #[error("rescale is undefined: mean action norm is zero")]
    DegenerateActions,
    #[error("frame index {t} out of range for demo of length {len}")]
    FrameOutOfRange { t: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    initial_joints: Vec<f64>,
    actions: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_points: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    goal: Option<Vec<f64>>,
}

/// One demonstration trajectory. Frames are indexed `0..len()`; before
/// augmentation frame 0 is the first recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub initial_joints: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub flow_points: Option<Vec<Vec<[f64; 2]>>>,
    pub goal: Option<Vec<f64>>,
    augmented: bool,
}

impl Demonstration {
    pub fn new(
        initial_joints: Vec<f64>,
        actions: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        flow_points: Option<Vec<Vec<[f64; 2]>>>,
        goal: Option<Vec<f64>>,
    ) -> Self {
        Self {
            initial_joints,
            actions,
            features,
            flow_points,
            goal,
            augmented: false,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Prepends the synthetic frame: `actions[0] = initial_joints`, the
    /// first feature (and flow frame, if present) duplicated. Grows the
    /// demo by exactly one frame.
    pub fn augment_initial(&mut self) -> Result<(), DataError> {
        if self.augmented {
            return Err(DataError::AlreadyAugmented { demo: 0 });
        }
        self.actions.insert(0, self.initial_joints.clone());
        let first = self.features[0].clone();
        self.features.insert(0, first);
        if let Some(flow) = &mut self.flow_points {
            let first = flow[0].clone();
            flow.insert(0, first);
        }
        self.augmented = true;
        Ok(())
    }

    fn validate(&self, demo: usize) -> Result<(), DataError> {
        let bad = |detail: String| DataError::Malformed { demo, detail };
        if self.actions.is_empty() {
            return Err(bad("no action frames".into()));
        }
        if self.features.len() != self.actions.len() {
            return Err(bad(format!(
                "{} feature frames vs {} action frames",
                self.features.len(),
                self.actions.len()
            )));
        }
        let d_q = self.initial_joints.len();
        if d_q == 0 {
            return Err(bad("initial_joints is empty".into()));
        }
        for (t, a) in self.actions.iter().enumerate() {
            if a.len() != d_q {
                return Err(bad(format!("action frame {} has {} dims, expected {}", t, a.len(), d_q)));
            }
        }
        let d_f = self.features[0].len();
        if d_f == 0 {
            return Err(bad("features are zero-dimensional".into()));
        }
        for (t, f) in self.features.iter().enumerate() {
            if f.len() != d_f {
                return Err(bad(format!("feature frame {} has {} dims, expected {}", t, f.len(), d_f)));
            }
        }
        if let Some(flow) = &self.flow_points {
            if flow.len() != self.actions.len() {
                return Err(bad(format!(
                    "{} flow frames vs {} action frames",
                    flow.len(),
                    self.actions.len()
                )));
            }
            for (t, frame) in flow.iter().enumerate() {
                if frame.len() != FLOW_POINT_COUNT {
                    return Err(bad(format!(
                        "flow frame {} has {} points, expected {}",
                        t,
                        frame.len(),
                        FLOW_POINT_COUNT
                    )));
                }
            }
        }
        if let Some(goal) = &self.goal {
            if goal.is_empty() {
                return Err(bad("goal present but empty".into()));
            }
        }
        Ok(())
    }
}

/// A set of demonstrations sharing dimensions and goal/flow presence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self, DataError> {
        let ds = Self { demos };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn d_q(&self) -> usize {
        self.demos[0].initial_joints.len()
    }

    pub fn d_f(&self) -> usize {
        self.demos[0].features[0].len()
    }

    /// Goal dimension, zero when demos carry no goal.
    pub fn d_goal(&self) -> usize {
        self.demos[0].goal.as_ref().map_or(0, |g| g.len())
    }

    pub fn has_flow(&self) -> bool {
        self.demos[0].flow_points.is_some()
    }

    /// Dimension of the behavioral state `[a; c*phi; c*goal]`.
    pub fn behavioral_dim(&self) -> usize {
        self.d_q() + self.d_f() + self.d_goal()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.demos.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for (i, d) in self.demos.iter().enumerate() {
            d.validate(i)?;
        }
        let (d_q, d_f, d_g, flow) = (self.d_q(), self.d_f(), self.d_goal(), self.has_flow());
        for (i, d) in self.demos.iter().enumerate() {
            let bad = |detail: String| DataError::Malformed { demo: i, detail };
            if d.initial_joints.len() != d_q {
                return Err(bad(format!("d_q {} vs dataset {}", d.initial_joints.len(), d_q)));
            }
            if d.features[0].len() != d_f {
                return Err(bad(format!("d_f {} vs dataset {}", d.features[0].len(), d_f)));
            }
            let dg = d.goal.as_ref().map_or(0, |g| g.len());
            if dg != d_g {
                return Err(bad(format!("goal dim {} vs dataset {}", dg, d_g)));
            }
            if d.flow_points.is_some() != flow {
                return Err(bad("flow presence differs across demos".into()));
            }
        }
        Ok(())
    }

    /// Augments every demonstration in place.
    pub fn augment_all(&mut self) -> Result<(), DataError> {
        for (i, d) in self.demos.iter_mut().enumerate() {
            d.augment_initial().map_err(|_| DataError::AlreadyAugmented { demo: i })?;
        }
        Ok(())
    }
}

/// Reads a JSONL dataset, validating shape consistency across demos.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<Dataset, DataError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut demos = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                line: idx + 1,
                source,
            })?;
        demos.push(Demonstration {
            initial_joints: rec.initial_joints,
            actions: rec.actions,
            features: rec.features,
            flow_points: rec.flow_points,
            goal: rec.goal,
            augmented: false,
        });
    }
    Dataset::new(demos)
}

/// Writes a dataset back to JSONL. Augmented datasets are rejected so the
/// synthetic frame never leaks into files.
pub fn save_dataset<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<(), DataError> {
    if dataset.demos.iter().any(|d| d.augmented) {
        return Err(DataError::SaveAugmented);
    }
    let mut out = fs::File::create(path)?;
    for d in &dataset.demos {
        let rec = DemoRecord {
            initial_joints: d.initial_joints.clone(),
            actions: d.actions.clone(),
            features: d.features.clone(),
            flow_points: d.flow_points.clone(),
            goal: d.goal.clone(),
        };
        let line = serde_json::to_string(&rec).expect("demo serialization cannot fail");
        writeln!(out, "{}", line)?;
    }
    Ok(())
}

/// Rescale factor `c = mean ||a_t|| / mean ||phi_t||`, pooled over every
/// frame of every demonstration. Applied multiplicatively to features (and
/// the goal) so both halves of the behavioral state live on comparable
/// scales.
pub fn compute_rescale(dataset: &Dataset) -> Result<f64, DataError> {
    let mut action_sum = 0.0;
    let mut feature_sum = 0.0;
    let mut frames = 0usize;
    for d in &dataset.demos {
        for a in &d.actions {
            action_sum += a.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        for f in &d.features {
            feature_sum += f.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        frames += d.len();
    }
    if frames == 0 {
        return Err(DataError::EmptyDataset);
    }
    if feature_sum == 0.0 {
        return Err(DataError::DegenerateFeatures);
    }
    if action_sum == 0.0 {
        return Err(DataError::DegenerateActions);
    }
    Ok(action_sum / feature_sum)
}

/// Behavioral state at frame `t`: `[a_t ; c*phi_t ; c*goal]`.
pub fn behavioral_state(demo: &Demonstration, t: usize, c: f64) -> Result<Vec<f64>, DataError> {
    if t >= demo.len() {
        return Err(DataError::FrameOutOfRange { t, len: demo.len() });
    }
    let d_g = demo.goal.as_ref().map_or(0, |g| g.len());
    let mut xi = Vec::with_capacity(demo.actions[t].len() + demo.features[t].len() + d_g);
    xi.extend_from_slice(&demo.actions[t]);
    xi.extend(demo.features[t].iter().map(|v| c * v));
    if let Some(goal) = &demo.goal {
        xi.extend(goal.iter().map(|v| c * v));
    }
    Ok(xi)
}
