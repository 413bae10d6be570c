//! Gradient co-training of the lifting MLP and the transition matrix.
//!
//! Both live in one parameter set and are optimized jointly on the
//! multi-step coherence objective, with separate learning rates. Each
//! anchor frame contributes the summed squared error of rolling its
//! latent forward 1..h steps against the encodings of the frames that
//! actually followed it.

use crate::gradkit::{
    clip_global_norm, Adam, GroupSpec, OptimError, Tape, TapeError, Tensor, VarId,
};
use crate::koopman::model::{KoopmanModel, LatentMap, ModelDims, ModelError};
use crate::koopman::ops::{self, OpsError};
use crate::lifting::{InitScheme, LiftingError, SpectralEncoder};
use crate::trajdata::{DataError, Dataset};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset must be action-augmented before training")]
    NotAugmented,
    #[error("no anchors: every demonstration is too short for the horizon")]
    NoAnchors,
    #[error("training diverged: loss is not finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ops(#[from] OpsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Lift(#[from] LiftingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder_lr: f64,
    pub koopman_lr: f64,
    /// Maximum prediction depth per anchor.
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hidden widths of the lifting MLP.
    pub hidden: (usize, usize),
    /// Number of learned latent coordinates appended to the behavioral state.
    pub psi_dim: usize,
    /// Start `K` at the identity instead of random.
    pub identity_init: bool,
    /// Treat rollout targets as constants so gradients flow only through
    /// the predicted side.
    pub detach_targets: bool,
    /// Shorten horizons near demo ends instead of dropping those anchors.
    pub truncate_tail: bool,
    pub clip_max_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 5e-4,
            koopman_lr: 5e-5,
            horizon: 15,
            epochs: 100,
            batch_size: 32,
            hidden: (128, 256),
            psi_dim: 256,
            identity_init: true,
            detach_targets: true,
            truncate_tail: true,
            clip_max_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: TrainConfig,
    /// Full-dataset coherence loss before training and after each epoch,
    /// so the curve has `epochs + 1` entries.
    pub loss_curve: Vec<f64>,
    /// Spectral radius of `K` on the same schedule.
    pub spectral_curve: Vec<f64>,
}

/// Anchor: demo index, frame index, rollout depth.
type Anchor = (usize, usize, usize);

const K_PARAM: usize = SpectralEncoder::PARAM_COUNT;

fn eval_state(
    params: &[Tensor],
    encoder: &mut SpectralEncoder,
    xis: &[Vec<Vec<f64>>],
    horizon: usize,
    truncate_tail: bool,
) -> Result<(f64, f64), TrainError> {
    encoder.set_params(&params[..K_PARAM]);
    let mut latents = Vec::with_capacity(xis.len());
    for demo in xis {
        let mut zs = Vec::with_capacity(demo.len());
        for xi in demo {
            let mut z = xi.clone();
            z.extend(encoder.encode(xi)?);
            zs.push(z);
        }
        latents.push(zs);
    }
    let k = &params[K_PARAM];
    let loss = ops::pooled_coherence_loss(k, &latents, horizon, truncate_tail)?;
    let rho = ops::spectral_radius(k)?;
    Ok((loss, rho))
}

/// Trains a model with a learned lifting on an augmented dataset.
/// Deterministic for a fixed config.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<KoopmanModel, TrainError> {
    if !data.demos.iter().all(|d| d.is_augmented()) {
        return Err(TrainError::NotAugmented);
    }
    let rescale = crate::trajdata::compute_rescale(data)?;
    let dims = ModelDims {
        d_q: data.d_q(),
        d_f: data.d_f(),
        d_g: data.d_goal(),
        d_z: data.d_q() + data.d_f() + data.d_goal() + cfg.psi_dim,
    };
    let d_xi = dims.xi_dim();
    let d_z = dims.d_z;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = SpectralEncoder::new(
        d_xi,
        cfg.hidden,
        cfg.psi_dim,
        InitScheme::UniformFanIn,
        cfg.seed,
    );
    let mut params = encoder.params();
    params.push(if cfg.identity_init {
        Tensor::eye(d_z)
    } else {
        let bound = 1.0 / (d_z as f64).sqrt();
        Tensor::uniform(vec![d_z, d_z], -bound, bound, &mut rng)
    });
    let groups = vec![
        GroupSpec::new("encoder", cfg.encoder_lr, (0..K_PARAM).collect()),
        GroupSpec::new("koopman", cfg.koopman_lr, vec![K_PARAM]),
    ];
    let mut adam = Adam::new(&params, groups)?;

    // Behavioral states are fixed throughout; precompute them per demo.
    let xis: Vec<Vec<Vec<f64>>> = data
        .demos
        .iter()
        .map(|demo| {
            (0..demo.len())
                .map(|t| crate::trajdata::behavioral_state(demo, t, rescale))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let mut anchors: Vec<Anchor> = Vec::new();
    for (d, demo_xis) in xis.iter().enumerate() {
        for (t, h) in ops::anchor_horizons(demo_xis.len(), cfg.horizon, cfg.truncate_tail) {
            anchors.push((d, t, h));
        }
    }
    if anchors.is_empty() {
        return Err(TrainError::NoAnchors);
    }

    let mut loss_curve = Vec::with_capacity(cfg.epochs + 1);
    let mut spectral_curve = Vec::with_capacity(cfg.epochs + 1);
    let (loss0, rho0) =
        eval_state(&params, &mut encoder, &xis, cfg.horizon, cfg.truncate_tail)?;
    loss_curve.push(loss0);
    spectral_curve.push(rho0);

    for epoch in 0..cfg.epochs {
        anchors.shuffle(&mut rng);
        for (batch_idx, batch) in anchors.chunks(cfg.batch_size.max(1)).enumerate() {
            // Targets use the parameters as of the start of the batch.
            encoder.set_params(&params[..K_PARAM]);
            let mut tape = Tape::new();
            let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let mut terms = Vec::new();
            for &(d, t, h) in batch {
                let xi_leaf = tape.leaf(Tensor::vector(xis[d][t].clone()));
                let psi = SpectralEncoder::encode_on_tape(&mut tape, &ids[..K_PARAM], xi_leaf)?;
                let mut cur = tape.concat(xi_leaf, psi)?;
                for l in 1..=h {
                    cur = tape.matvec(ids[K_PARAM], cur)?;
                    let target = if cfg.detach_targets {
                        let xi = &xis[d][t + l];
                        let mut z = xi.clone();
                        z.extend(encoder.encode(xi)?);
                        tape.leaf(Tensor::vector(z))
                    } else {
                        let xi_t = tape.leaf(Tensor::vector(xis[d][t + l].clone()));
                        let psi_t =
                            SpectralEncoder::encode_on_tape(&mut tape, &ids[..K_PARAM], xi_t)?;
                        tape.concat(xi_t, psi_t)?
                    };
                    let diff = tape.sub(cur, target)?;
                    terms.push(tape.sq_norm(diff));
                }
            }
            let total = tape.sum_scalars(terms)?;
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = tape.backward(loss)?;
            let mut grad_tensors: Vec<Tensor> = ids
                .iter()
                .zip(params.iter())
                .map(|(&id, p)| grads.wrt_or_zeros(id, p.shape()))
                .collect();
            clip_global_norm(&mut grad_tensors, cfg.clip_max_norm);
            adam.step(&mut params, &grad_tensors)?;
        }
        let (loss, rho) = eval_state(&params, &mut encoder, &xis, cfg.horizon, cfg.truncate_tail)?;
        loss_curve.push(loss);
        spectral_curve.push(rho);
    }

    encoder.set_params(&params[..K_PARAM]);
    let k = params.pop().expect("params holds the transition matrix");
    let model = KoopmanModel {
        dims,
        map: LatentMap::Mlp(encoder),
        k,
        rescale,
        horizon: cfg.horizon,
        flow_codec: None,
        train_record: Some(TrainRecord {
            config: cfg.clone(),
            loss_curve,
            spectral_curve,
        }),
    };
    model.validate()?;
    Ok(model)
}
