//! Convolutional autoencoder over tracked point flows.
//!
//! A flow frame is 256 tracked points in pixel coordinates. Arranged
//! row-major onto a 16x16 grid they form a 2-channel image (u in channel 0,
//! v in channel 1). The encoder halves the spatial resolution with a
//! stride-2 convolution to 8 channels and projects back down to 2 with a
//! 1x1 convolution, giving a 2x8x8 latent read out as a 128-dim feature.
//! The decoder is a stack of transposed convolutions: a stride-2 layer
//! upsamples to 32 channels at full resolution, and after a rectifier a
//! stride-1 3x3 layer projects back to the 2 coordinate channels. A final
//! rectifier keeps decoded coordinates non-negative.

use crate::gradkit::{
    clip_global_norm, Adam, GroupSpec, OptimError, Tape, TapeError, Tensor, VarId,
};
use crate::trajdata::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FLOW_POINTS: usize = 256;
pub const GRID_SIDE: usize = 16;
pub const LATENT_SIDE: usize = 8;
pub const CHANNELS: usize = 2;
pub const HIDDEN_CHANNELS: usize = 8;
pub const DEC_CHANNELS: usize = 32;
/// Length of the encoded feature vector: 2 channels x 8 x 8.
pub const LATENT_DIM: usize = CHANNELS * LATENT_SIDE * LATENT_SIDE;
/// Decoder kernel size; with stride 2 and padding 1 a 4x4 window doubles
/// 8x8 to 16x16 covering every output cell evenly.
const DEC_KERNEL: usize = 4;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow frame has {got} points, expected {expected}")]
    WrongPointCount { got: usize, expected: usize },
    #[error("{what} has length {got}, expected {expected}")]
    WrongLength {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("grid has shape {got:?}, expected {expected:?}")]
    WrongShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("training diverged: loss is not finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("no flow frames to train on")]
    NoFrames,
    #[error("demonstration has no flow frames to encode")]
    MissingFlow,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Lays 256 points onto the 2x16x16 grid: point `j` lands at row `j / 16`,
/// column `j % 16`, with u in channel 0 and v in channel 1.
pub fn grid_from_points(points: &[[f64; 2]]) -> Result<Tensor, FlowError> {
    if points.len() != FLOW_POINTS {
        return Err(FlowError::WrongPointCount {
            got: points.len(),
            expected: FLOW_POINTS,
        });
    }
    let mut data = vec![0.0; CHANNELS * GRID_SIDE * GRID_SIDE];
    for (j, p) in points.iter().enumerate() {
        data[j] = p[0];
        data[GRID_SIDE * GRID_SIDE + j] = p[1];
    }
    Ok(Tensor::new(vec![CHANNELS, GRID_SIDE, GRID_SIDE], data))
}

/// Inverse of [`grid_from_points`].
pub fn points_from_grid(grid: &Tensor) -> Result<Vec<[f64; 2]>, FlowError> {
    let expected = vec![CHANNELS, GRID_SIDE, GRID_SIDE];
    if grid.shape() != expected.as_slice() {
        return Err(FlowError::WrongShape {
            got: grid.shape().to_vec(),
            expected,
        });
    }
    let cells = GRID_SIDE * GRID_SIDE;
    Ok((0..FLOW_POINTS)
        .map(|j| [grid.data()[j], grid.data()[cells + j]])
        .collect())
}

/// Parameter indices within [`FlowCodec::params`] order.
const ENC_CONV_W: usize = 0;
const ENC_CONV_B: usize = 1;
const ENC_PROJ_W: usize = 2;
const ENC_PROJ_B: usize = 3;
const DEC_TCONV_W: usize = 4;
const DEC_TCONV_B: usize = 5;
const DEC_OUT_W: usize = 6;
const DEC_OUT_B: usize = 7;
const PARAM_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCodec {
    params: Vec<Tensor>,
}

impl FlowCodec {
    /// Fresh codec with fan-in uniform initialization.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // (weight shape, bias shape, fan-in). The transposed kernel is laid
        // out [Cin, Cout, kh, kw], so its fan-in also reads Cin * kh * kw.
        let spec: [(Vec<usize>, Vec<usize>, usize); 4] = [
            (
                vec![HIDDEN_CHANNELS, CHANNELS, 3, 3],
                vec![HIDDEN_CHANNELS],
                CHANNELS * 9,
            ),
            (
                vec![CHANNELS, HIDDEN_CHANNELS, 1, 1],
                vec![CHANNELS],
                HIDDEN_CHANNELS,
            ),
            (
                vec![CHANNELS, DEC_CHANNELS, DEC_KERNEL, DEC_KERNEL],
                vec![DEC_CHANNELS],
                CHANNELS * DEC_KERNEL * DEC_KERNEL,
            ),
            (
                vec![DEC_CHANNELS, CHANNELS, 3, 3],
                vec![CHANNELS],
                DEC_CHANNELS * 9,
            ),
        ];
        let mut params = Vec::with_capacity(PARAM_COUNT);
        for (w_shape, b_shape, fan_in) in spec {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.push(Tensor::uniform(w_shape, -bound, bound, &mut rng));
            params.push(Tensor::uniform(b_shape, -bound, bound, &mut rng));
        }
        Self { params }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), PARAM_COUNT);
        for (cur, new) in self.params.iter_mut().zip(params.iter()) {
            assert_eq!(cur.shape(), new.shape(), "codec parameter shape changed");
            *cur = new.clone();
        }
    }

    /// Encoder ops on a tape: `grid [2,16,16] -> latent [2,8,8]`.
    pub fn encode_on_tape(
        tape: &mut Tape,
        param_ids: &[VarId],
        grid: VarId,
    ) -> Result<VarId, TapeError> {
        let h = tape.conv2d(grid, param_ids[ENC_CONV_W], param_ids[ENC_CONV_B], 2, 1)?;
        tape.conv2d(h, param_ids[ENC_PROJ_W], param_ids[ENC_PROJ_B], 1, 0)
    }

    /// Decoder ops on a tape: `latent [2,8,8] -> grid [2,16,16]`, rectified.
    pub fn decode_on_tape(
        tape: &mut Tape,
        param_ids: &[VarId],
        latent: VarId,
    ) -> Result<VarId, TapeError> {
        let up = tape.conv_transpose2d(
            latent,
            param_ids[DEC_TCONV_W],
            param_ids[DEC_TCONV_B],
            2,
            1,
            0,
        )?;
        let h = tape.relu(up);
        let out = tape.conv_transpose2d(h, param_ids[DEC_OUT_W], param_ids[DEC_OUT_B], 1, 1, 0)?;
        Ok(tape.relu(out))
    }

    fn leaf_params(&self, tape: &mut Tape) -> Vec<VarId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Feature vector for one flow frame.
    pub fn encode(&self, points: &[[f64; 2]]) -> Result<Vec<f64>, FlowError> {
        let grid = grid_from_points(points)?;
        let mut tape = Tape::new();
        let ids = self.leaf_params(&mut tape);
        let g = tape.leaf(grid);
        let z = Self::encode_on_tape(&mut tape, &ids, g)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Point set decoded from a 128-dim feature vector. Coordinates are
    /// non-negative by construction.
    pub fn decode(&self, latent: &[f64]) -> Result<Vec<[f64; 2]>, FlowError> {
        if latent.len() != LATENT_DIM {
            return Err(FlowError::WrongLength {
                what: "flow latent",
                got: latent.len(),
                expected: LATENT_DIM,
            });
        }
        let mut tape = Tape::new();
        let ids = self.leaf_params(&mut tape);
        let z = tape.leaf(Tensor::new(
            vec![CHANNELS, LATENT_SIDE, LATENT_SIDE],
            latent.to_vec(),
        ));
        let g = Self::decode_on_tape(&mut tape, &ids, z)?;
        points_from_grid(tape.value(g))
    }
}

/// Replaces every demonstration's feature vectors with codec encodings of
/// its flow frames. Every demo must carry flow points.
pub fn attach_flow_features(data: &mut Dataset, codec: &FlowCodec) -> Result<(), FlowError> {
    for demo in &mut data.demos {
        let flow = demo.flow_points.as_ref().ok_or(FlowError::MissingFlow)?;
        let features = flow
            .iter()
            .map(|frame| codec.encode(frame))
            .collect::<Result<Vec<_>, _>>()?;
        demo.features = features;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 0.99,
            epochs: 200,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrainRecord {
    /// Mean reconstruction loss per epoch (squared grid error per frame).
    pub loss_curve: Vec<f64>,
}

/// Trains the codec on a pool of flow frames by minimizing per-frame
/// squared reconstruction error of the grid, with Adam and exponential
/// learning-rate decay. Deterministic for a fixed seed.
pub fn train_flow_ae(
    frames: &[Vec<[f64; 2]>],
    cfg: &FlowTrainConfig,
) -> Result<(FlowCodec, FlowTrainRecord), FlowError> {
    if frames.is_empty() {
        return Err(FlowError::NoFrames);
    }
    let grids: Vec<Tensor> = frames
        .iter()
        .map(|f| grid_from_points(f))
        .collect::<Result<_, _>>()?;

    let mut codec = FlowCodec::new(cfg.seed);
    let mut params = codec.params();
    let group = GroupSpec::new("codec", cfg.learning_rate, (0..params.len()).collect());
    let mut adam = Adam::new(&params, vec![group])?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let mut terms = Vec::with_capacity(batch.len());
            for &fi in batch {
                let g = tape.leaf(grids[fi].clone());
                let z = FlowCodec::encode_on_tape(&mut tape, &ids, g)?;
                let rec = FlowCodec::decode_on_tape(&mut tape, &ids, z)?;
                let diff = tape.sub(rec, g)?;
                terms.push(tape.sq_norm(diff));
            }
            let total = tape.sum_scalars(terms)?;
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(FlowError::NanLoss {
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
            clip_global_norm(&mut grad_tensors, 1.0);
            adam.step(&mut params, &grad_tensors)?;
            epoch_loss += loss_value * batch.len() as f64;
        }
        loss_curve.push(epoch_loss / grids.len() as f64);
        adam.scale_learning_rates(cfg.lr_decay);
    }
    codec.set_params(&params);
    Ok((codec, FlowTrainRecord { loss_curve }))
}

/// Root-mean-square point error of `decode(encode(frame))` against the
/// original frames, in pixels.
pub fn reconstruction_rmse(codec: &FlowCodec, frames: &[Vec<[f64; 2]>]) -> Result<f64, FlowError> {
    if frames.is_empty() {
        return Err(FlowError::NoFrames);
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for frame in frames {
        let rec = codec.decode(&codec.encode(frame)?)?;
        for (p, q) in frame.iter().zip(rec.iter()) {
            sum_sq += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            count += 1;
        }
    }
    Ok((sum_sq / count as f64).sqrt())
}
