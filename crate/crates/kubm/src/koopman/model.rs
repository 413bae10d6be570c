//! Model container and on-disk format.
//!
//! A trained model bundles the transition matrix `K`, the map from raw
//! observations into the latent space, the action/feature rescale factor,
//! and optionally the flow codec and a record of the training run. Files
//! are JSON wrapped in a versioned envelope so stale files fail loudly
//! instead of deserializing into garbage.

use crate::flowcodec::FlowCodec;
use crate::gradkit::Tensor;
use crate::koopman::ops::{self, OpsError};
use crate::koopman::train::TrainRecord;
use crate::lifting::{lift, lifted_dim, LiftVariant, LiftingError, SpectralEncoder};
use crate::trajdata::{compute_rescale, DataError, Dataset, Demonstration};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is corrupt: {detail}")]
    Corrupt { detail: String },
    #[error("model file has format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{what} has length {got}, expected {expected}")]
    BadLength {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("model is internally inconsistent: {detail}")]
    Inconsistent { detail: String },
    #[error("dataset must be action-augmented before fitting")]
    NotAugmented,
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Lift(#[from] LiftingError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Sizes of the raw and lifted spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Action (joint command) dimension.
    pub d_q: usize,
    /// Visual feature dimension.
    pub d_f: usize,
    /// Goal dimension, zero when the model is not goal-conditioned.
    pub d_g: usize,
    /// Latent dimension, the size of `K`.
    pub d_z: usize,
}

impl ModelDims {
    /// Dimension of the behavioral state `[action, scaled features, scaled goal]`.
    pub fn xi_dim(&self) -> usize {
        self.d_q + self.d_f + self.d_g
    }
}

/// How raw behavioral states become latent vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LatentMap {
    /// Learned lifting: latent is the behavioral state with MLP coordinates
    /// appended.
    Mlp(SpectralEncoder),
    /// Fixed polynomial lifting of (action, scaled features+goal).
    Poly(LiftVariant),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub dims: ModelDims,
    pub map: LatentMap,
    /// Latent transition matrix, row-major d_z x d_z.
    pub k: Tensor,
    /// Scale applied to features and goal before they enter the latent.
    pub rescale: f64,
    /// Prediction horizon the model was trained for.
    pub horizon: usize,
    pub flow_codec: Option<FlowCodec>,
    pub train_record: Option<TrainRecord>,
}

impl KoopmanModel {
    /// Behavioral state for one frame: `[action, c*features, c*goal]`.
    pub fn behavioral_state(
        &self,
        action: &[f64],
        features: &[f64],
        goal: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        check_len("action", action, self.dims.d_q)?;
        check_len("features", features, self.dims.d_f)?;
        check_len("goal", goal, self.dims.d_g)?;
        let mut xi = Vec::with_capacity(self.dims.xi_dim());
        xi.extend_from_slice(action);
        xi.extend(features.iter().map(|v| v * self.rescale));
        xi.extend(goal.iter().map(|v| v * self.rescale));
        Ok(xi)
    }

    /// Lifts one frame into the latent space.
    pub fn encode_state(
        &self,
        action: &[f64],
        features: &[f64],
        goal: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let xi = self.behavioral_state(action, features, goal)?;
        let z = match &self.map {
            LatentMap::Mlp(enc) => {
                let psi = enc.encode(&xi)?;
                let mut z = xi;
                z.extend_from_slice(&psi);
                z
            }
            LatentMap::Poly(variant) => lift(&xi[..self.dims.d_q], &xi[self.dims.d_q..], *variant),
        };
        check_len("latent", &z, self.dims.d_z)?;
        Ok(z)
    }

    /// One latent transition, `K z`.
    pub fn step_latent(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len("latent", z, self.dims.d_z)?;
        let d = self.dims.d_z;
        let kd = self.k.data();
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &kd[i * d..(i + 1) * d];
            *o = row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// The action read directly off a latent vector.
    pub fn action_of<'a>(&self, z: &'a [f64]) -> Result<&'a [f64], ModelError> {
        check_len("latent", z, self.dims.d_z)?;
        Ok(&z[..self.dims.d_q])
    }

    /// Index of the first feature coordinate inside a latent vector.
    pub fn feature_offset(&self) -> usize {
        match &self.map {
            // Latent starts with the behavioral state, features follow the action.
            LatentMap::Mlp(_) => self.dims.d_q,
            // Polynomial order is [x_h, x_h^2, x_o, ...]; features open x_o.
            LatentMap::Poly(_) => 2 * self.dims.d_q,
        }
    }

    /// Features read off a latent vector, unscaled back to raw units.
    pub fn features_of(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_len("latent", z, self.dims.d_z)?;
        let start = self.feature_offset();
        Ok(z[start..start + self.dims.d_f]
            .iter()
            .map(|v| v / self.rescale)
            .collect())
    }

    /// Latent trajectory for an augmented demonstration.
    pub fn encode_demo(&self, demo: &Demonstration) -> Result<Vec<Vec<f64>>, ModelError> {
        if !demo.is_augmented() {
            return Err(ModelError::NotAugmented);
        }
        let goal = demo.goal.as_deref().unwrap_or(&[]);
        (0..demo.len())
            .map(|t| self.encode_state(&demo.actions[t], &demo.features[t], goal))
            .collect()
    }

    pub fn spectral_radius(&self) -> Result<f64, OpsError> {
        ops::spectral_radius(&self.k)
    }

    /// Structural consistency checks, run after deserialization.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k.shape() != [self.dims.d_z, self.dims.d_z] {
            return Err(ModelError::Inconsistent {
                detail: format!(
                    "K has shape {:?} but d_z is {}",
                    self.k.shape(),
                    self.dims.d_z
                ),
            });
        }
        if !(self.rescale.is_finite() && self.rescale > 0.0) {
            return Err(ModelError::Inconsistent {
                detail: format!("rescale factor {} is not a positive number", self.rescale),
            });
        }
        let expected_dz = match &self.map {
            LatentMap::Mlp(enc) => {
                if enc.d_in() != self.dims.xi_dim() {
                    return Err(ModelError::Inconsistent {
                        detail: format!(
                            "encoder takes {} inputs but the behavioral state has {}",
                            enc.d_in(),
                            self.dims.xi_dim()
                        ),
                    });
                }
                self.dims.xi_dim() + enc.d_out()
            }
            LatentMap::Poly(variant) => {
                lifted_dim(self.dims.d_q, self.dims.d_f + self.dims.d_g, *variant)
            }
        };
        if expected_dz != self.dims.d_z {
            return Err(ModelError::Inconsistent {
                detail: format!("map produces {expected_dz}-dim latents but d_z is {}", self.dims.d_z),
            });
        }
        Ok(())
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), ModelError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(ModelError::BadLength {
            what,
            got: v.len(),
            expected,
        })
    }
}

/// Fits a model with a fixed polynomial lifting by least squares, no
/// gradient training involved. The dataset must already be augmented.
pub fn fit_poly_model(
    data: &Dataset,
    variant: LiftVariant,
    ridge: f64,
    horizon: usize,
) -> Result<KoopmanModel, ModelError> {
    if !data.demos.iter().all(|d| d.is_augmented()) {
        return Err(ModelError::NotAugmented);
    }
    let rescale = compute_rescale(data)?;
    let dims = ModelDims {
        d_q: data.d_q(),
        d_f: data.d_f(),
        d_g: data.d_goal(),
        d_z: lifted_dim(data.d_q(), data.d_f() + data.d_goal(), variant),
    };
    let mut model = KoopmanModel {
        dims,
        map: LatentMap::Poly(variant),
        k: Tensor::zeros(vec![dims.d_z, dims.d_z]),
        rescale,
        horizon,
        flow_codec: None,
        train_record: None,
    };
    let latents: Vec<Vec<Vec<f64>>> = data
        .demos
        .iter()
        .map(|d| model.encode_demo(d))
        .collect::<Result<_, _>>()?;
    let pairs = ops::latent_pairs(&latents);
    model.k = ops::fit_edmd(&pairs, ridge)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    model: KoopmanModel,
}

/// Only the version field, for probing before full deserialization.
#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

pub fn save_model(path: &Path, model: &KoopmanModel) -> Result<(), ModelError> {
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&envelope).map_err(|e| ModelError::Corrupt {
        detail: format!("serialization failed: {e}"),
    })?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KoopmanModel, ModelError> {
    let text = fs::read_to_string(path)?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| ModelError::Corrupt {
            detail: format!("not a model file: {e}"),
        })?;
    match probe.format_version {
        Some(v) if v == FORMAT_VERSION => {}
        Some(v) => {
            return Err(ModelError::VersionMismatch {
                found: v,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(ModelError::Corrupt {
                detail: "missing format_version field".into(),
            })
        }
    }
    let envelope: Envelope = serde_json::from_str(&text).map_err(|e| ModelError::Corrupt {
        detail: e.to_string(),
    })?;
    envelope.model.validate()?;
    Ok(envelope.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdata::Demonstration;

    /// Three-demo dataset whose lifted coordinates all evolve exactly
    /// linearly: actions decay geometrically (a' = 0.9 a, so every action
    /// monomial is geometric too) and features are constant per demo. The
    /// duplicated first feature frame introduced by augmentation is then
    /// consistent with the dynamics, so a polynomial fit can be exact.
    fn linear_dataset() -> Dataset {
        let mut demos = Vec::new();
        for k in 0..3 {
            let mut a = vec![1.0 + k as f64 * 0.3, -0.5 - 0.2 * k as f64];
            let phi = vec![0.2 + 0.1 * k as f64, 0.4 - 0.15 * k as f64];
            let initial = a.clone();
            let mut actions = Vec::new();
            let mut features = Vec::new();
            for _ in 0..20 {
                features.push(phi.clone());
                a = a.iter().map(|v| 0.9 * v).collect();
                actions.push(a.clone());
            }
            demos.push(Demonstration::new(
                initial,
                actions,
                features,
                None,
                Some(vec![0.3, 0.7]),
            ));
        }
        let mut data = Dataset::new(demos).unwrap();
        data.augment_all().unwrap();
        data
    }

    #[test]
    fn poly_fit_predicts_linear_dynamics() {
        let data = linear_dataset();
        let model = fit_poly_model(&data, LiftVariant::V2, 0.0, 10).unwrap();
        model.validate().unwrap();
        // One-step latent predictions must match the encoded next frames on
        // the training demos themselves.
        for demo in &data.demos {
            let latents = model.encode_demo(demo).unwrap();
            for t in 0..latents.len() - 1 {
                let pred = model.step_latent(&latents[t]).unwrap();
                for (p, q) in pred.iter().zip(latents[t + 1].iter()) {
                    assert!((p - q).abs() < 1e-6, "prediction error {}", (p - q).abs());
                }
            }
        }
    }

    #[test]
    fn unaugmented_dataset_is_rejected() {
        let demo = Demonstration::new(
            vec![0.0],
            vec![vec![1.0], vec![2.0]],
            vec![vec![1.0], vec![1.0]],
            None,
            None,
        );
        let data = Dataset::new(vec![demo]).unwrap();
        assert!(matches!(
            fit_poly_model(&data, LiftVariant::V1, 0.0, 5),
            Err(ModelError::NotAugmented)
        ));
    }

    #[test]
    fn action_prefix_is_preserved() {
        let data = linear_dataset();
        let model = fit_poly_model(&data, LiftVariant::V3, 0.0, 10).unwrap();
        let z = model
            .encode_state(&[0.4, -0.7], &[0.3, 0.2], &[0.0, 0.0])
            .unwrap();
        assert_eq!(model.action_of(&z).unwrap(), &[0.4, -0.7]);
    }

    #[test]
    fn features_of_inverts_the_rescale() {
        let data = linear_dataset();
        let model = fit_poly_model(&data, LiftVariant::V2, 0.0, 10).unwrap();
        let features = [0.31, -0.17];
        let z = model
            .encode_state(&[0.4, -0.7], &features, &[0.0, 0.0])
            .unwrap();
        let back = model.features_of(&z).unwrap();
        for (a, b) in back.iter().zip(features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let data = linear_dataset();
        let model = fit_poly_model(&data, LiftVariant::V2, 1e-9, 10).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model.k, loaded.k);
        assert_eq!(model.rescale.to_bits(), loaded.rescale.to_bits());
        let z0 = model
            .encode_state(&[0.1, 0.2], &[0.3, 0.4], &[0.0, 0.0])
            .unwrap();
        let z1 = loaded
            .encode_state(&[0.1, 0.2], &[0.3, 0.4], &[0.0, 0.0])
            .unwrap();
        assert_eq!(z0, z1);
        let s0 = model.step_latent(&z0).unwrap();
        let s1 = loaded.step_latent(&z1).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.json");
        std::fs::write(&path, r#"{"format_version": 99, "model": {}}"#).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ModelError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn missing_version_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.json");
        std::fs::write(&path, r#"{"model": {}}"#).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Corrupt { .. })));
    }

    #[test]
    fn syntactic_garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.json");
        std::fs::write(&path, "not json at all {{{").unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Corrupt { .. })));
    }
}
