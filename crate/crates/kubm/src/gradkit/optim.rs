//! Adam with parameter groups and global-norm gradient clipping.
//!
//! The trainer owns its parameters as a flat `Vec<Tensor>`; a [`GroupSpec`]
//! names a subset of those tensors and the learning rate they share. Groups
//! must partition the parameter list exactly, which is validated once when
//! the optimizer is built.

use super::tensor::Tensor;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter groups must partition the parameter list: {0}")]
    BadPartition(String),
    #[error("gradient for parameter {index} ({group}) contains NaN; step aborted")]
    PoisonedGradient { index: usize, group: String },
    #[error("step expected {expected} gradients, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("gradient {index} has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        index: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// A named set of parameter tensors sharing one learning rate.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub learning_rate: f64,
    /// Indices into the owner's parameter vector.
    pub members: Vec<usize>,
}

impl GroupSpec {
    pub fn new(name: &str, learning_rate: f64, members: Vec<usize>) -> Self {
        Self {
            name: name.to_string(),
            learning_rate,
            members,
        }
    }
}

pub struct Adam {
    groups: Vec<GroupSpec>,
    /// Learning rate per parameter index, derived from the groups.
    lr_by_param: Vec<f64>,
    group_by_param: Vec<usize>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl Adam {
    /// Builds optimizer state for `params`, validating that `groups` cover
    /// every parameter exactly once.
    pub fn new(params: &[Tensor], groups: Vec<GroupSpec>) -> Result<Self, OptimError> {
        let n = params.len();
        let mut lr_by_param = vec![f64::NAN; n];
        let mut group_by_param = vec![usize::MAX; n];
        for (gi, g) in groups.iter().enumerate() {
            for &pi in &g.members {
                if pi >= n {
                    return Err(OptimError::BadPartition(format!(
                        "group '{}' references parameter {} of {}",
                        g.name, pi, n
                    )));
                }
                if group_by_param[pi] != usize::MAX {
                    return Err(OptimError::BadPartition(format!(
                        "parameter {} appears in more than one group",
                        pi
                    )));
                }
                group_by_param[pi] = gi;
                lr_by_param[pi] = g.learning_rate;
            }
        }
        if let Some(orphan) = group_by_param.iter().position(|&g| g == usize::MAX) {
            return Err(OptimError::BadPartition(format!(
                "parameter {} belongs to no group",
                orphan
            )));
        }
        Ok(Self {
            groups,
            lr_by_param,
            group_by_param,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step_count: 0,
        })
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Overrides every group's learning rate by a common multiplier, used
    /// for schedules such as exponential decay.
    pub fn scale_learning_rates(&mut self, factor: f64) {
        for g in &mut self.groups {
            g.learning_rate *= factor;
        }
        for (pi, lr) in self.lr_by_param.iter_mut().enumerate() {
            let _ = pi;
            *lr *= factor;
        }
    }

    /// One bias-corrected Adam update. NaN anywhere in the gradients aborts
    /// the step before any state is touched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::GradientCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::GradientShape {
                    index: i,
                    got: g.shape().to_vec(),
                    expected: p.shape().to_vec(),
                });
            }
            if g.has_nan() {
                return Err(OptimError::PoisonedGradient {
                    index: i,
                    group: self.groups[self.group_by_param[i]].name.clone(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);

        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let lr = self.lr_by_param[i];
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint Euclidean norm does not exceed
/// `max_norm`. Returns the pre-clip norm. A second application is a no-op
/// up to floating-point rounding.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    total
}
