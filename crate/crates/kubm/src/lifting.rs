//! State lifting: hand-crafted polynomial dictionaries and the learned
//! spectral encoder.
//!
//! Both routes map a behavioral state into the latent space the Koopman
//! matrix acts on, and both keep the raw state inside the latent so actions
//! read off as the leading coordinates with no decoder.
//!
//! The polynomial dictionaries treat the state as a robot block `x_h` and an
//! object/feature block `x_o` and append fixed monomial and trigonometric
//! terms. The spectral encoder is a small ReLU MLP whose output is
//! concatenated onto the state.

use crate::gradkit::{Tape, TapeError, Tensor, VarId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LiftingError {
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("latent of length {got} cannot yield a {want}-dimensional action")]
    LatentTooShort { got: usize, want: usize },
}

/// Polynomial dictionary variants. All share the base block
/// `[x_h, x_h^2, x_o, x_o^2]` (squares elementwise) and differ in the extra
/// terms appended after it:
///
/// - `V1`: `x_o^3`, pairwise products `x_h[i] * x_h[j]` for `i < j`, `x_h^3`
/// - `V2`: the pairwise products and `x_h^3` only
/// - `V3`: `V2` plus `cos x_h, sin x_h, cos x_o, sin x_o`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LiftVariant {
    V1,
    V2,
    V3,
}

impl LiftVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Some(Self::V1),
            "v2" => Some(Self::V2),
            "v3" => Some(Self::V3),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::V3 => "v3",
        }
    }
}

/// Dimension of [`lift`]'s output for the given block sizes.
pub fn lifted_dim(n_h: usize, n_o: usize, variant: LiftVariant) -> usize {
    let base = 2 * n_h + 2 * n_o;
    let pairs = n_h * (n_h - 1) / 2;
    match variant {
        LiftVariant::V1 => base + n_o + pairs + n_h,
        LiftVariant::V2 => base + pairs + n_h,
        LiftVariant::V3 => base + pairs + n_h + 2 * n_h + 2 * n_o,
    }
}

/// Applies the polynomial dictionary. The output always starts with `x_h`
/// itself, so the robot block of the latent is the raw command.
pub fn lift(x_h: &[f64], x_o: &[f64], variant: LiftVariant) -> Vec<f64> {
    let mut out = Vec::with_capacity(lifted_dim(x_h.len(), x_o.len(), variant));
    out.extend_from_slice(x_h);
    out.extend(x_h.iter().map(|v| v * v));
    out.extend_from_slice(x_o);
    out.extend(x_o.iter().map(|v| v * v));
    match variant {
        LiftVariant::V1 => {
            out.extend(x_o.iter().map(|v| v * v * v));
            push_pairs(&mut out, x_h);
            out.extend(x_h.iter().map(|v| v * v * v));
        }
        LiftVariant::V2 => {
            push_pairs(&mut out, x_h);
            out.extend(x_h.iter().map(|v| v * v * v));
        }
        LiftVariant::V3 => {
            push_pairs(&mut out, x_h);
            out.extend(x_h.iter().map(|v| v * v * v));
            out.extend(x_h.iter().map(|v| v.cos()));
            out.extend(x_h.iter().map(|v| v.sin()));
            out.extend(x_o.iter().map(|v| v.cos()));
            out.extend(x_o.iter().map(|v| v.sin()));
        }
    }
    debug_assert_eq!(out.len(), lifted_dim(x_h.len(), x_o.len(), variant));
    out
}

fn push_pairs(out: &mut Vec<f64>, x: &[f64]) {
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            out.push(x[i] * x[j]);
        }
    }
}

/// Weight initialization for the spectral encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    UniformFanIn,
    /// All-zero parameters; the output is then the final bias for any input.
    Zeros,
}

/// Three-layer ReLU MLP lifting a behavioral state into the learned part of
/// the latent. Layer widths are `d_in -> hidden.0 -> hidden.1 -> d_out` with
/// rectifiers between affine maps and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEncoder {
    d_in: usize,
    hidden: (usize, usize),
    d_out: usize,
    /// `[w1, b1, w2, b2, w3, b3]` with weights stored `[out, in]` row-major.
    layers: Vec<Tensor>,
}

impl SpectralEncoder {
    pub const PARAM_COUNT: usize = 6;

    pub fn new(
        d_in: usize,
        hidden: (usize, usize),
        d_out: usize,
        init: InitScheme,
        seed: u64,
    ) -> Self {
        let dims = [(hidden.0, d_in), (hidden.1, hidden.0), (d_out, hidden.1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(Self::PARAM_COUNT);
        for (out, inp) in dims {
            match init {
                InitScheme::UniformFanIn => {
                    let bound = 1.0 / (inp as f64).sqrt();
                    layers.push(Tensor::uniform(vec![out, inp], -bound, bound, &mut rng));
                    layers.push(Tensor::uniform(vec![out], -bound, bound, &mut rng));
                }
                InitScheme::Zeros => {
                    layers.push(Tensor::zeros(vec![out, inp]));
                    layers.push(Tensor::zeros(vec![out]));
                }
            }
        }
        Self {
            d_in,
            hidden,
            d_out,
            layers,
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn hidden(&self) -> (usize, usize) {
        self.hidden
    }

    /// Flat parameter snapshot in `[w1, b1, w2, b2, w3, b3]` order.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.clone()
    }

    /// Replaces all parameters; shapes must match the construction dims.
    pub fn set_params(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), Self::PARAM_COUNT);
        for (cur, new) in self.layers.iter_mut().zip(params.iter()) {
            assert_eq!(cur.shape(), new.shape(), "encoder parameter shape changed");
            *cur = new.clone();
        }
    }

    /// Plain forward pass.
    pub fn encode(&self, xi: &[f64]) -> Result<Vec<f64>, LiftingError> {
        if xi.len() != self.d_in {
            return Err(LiftingError::DimensionMismatch {
                what: "encoder input",
                got: xi.len(),
                expected: self.d_in,
            });
        }
        let mut x = xi.to_vec();
        for (li, pair) in self.layers.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut y = b.data().to_vec();
            for i in 0..m {
                let row = &w.data()[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * x[j];
                }
                y[i] += acc;
            }
            if li + 1 < Self::PARAM_COUNT / 2 {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Forward pass recorded on a tape. `param_ids` must hold the six
    /// parameter leaves in [`SpectralEncoder::params`] order.
    pub fn encode_on_tape(
        tape: &mut Tape,
        param_ids: &[VarId],
        input: VarId,
    ) -> Result<VarId, TapeError> {
        assert_eq!(param_ids.len(), Self::PARAM_COUNT);
        let mut x = input;
        for (li, pair) in param_ids.chunks(2).enumerate() {
            x = tape.affine(pair[0], x, pair[1])?;
            if li + 1 < Self::PARAM_COUNT / 2 {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

/// Concatenates the behavioral state with its encoding: the latent a model
/// rolls forward is `[xi; psi]`.
pub fn assemble_latent(xi: &[f64], psi: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(xi.len() + psi.len());
    z.extend_from_slice(xi);
    z.extend_from_slice(psi);
    z
}

/// Reads the action straight out of a latent: its first `d_q` coordinates.
pub fn extract_action(z: &[f64], d_q: usize) -> Result<&[f64], LiftingError> {
    if z.len() < d_q {
        return Err(LiftingError::LatentTooShort {
            got: z.len(),
            want: d_q,
        });
    }
    Ok(&z[..d_q])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v2_golden_vector() {
        // x_h = (1, 2), x_o = (0, 1):
        // base [1,2, 1,4, 0,1, 0,1], pair 1*2, cubes [1,8].
        let z = lift(&[1.0, 2.0], &[0.0, 1.0], LiftVariant::V2);
        assert_eq!(z, vec![1.0, 2.0, 1.0, 4.0, 0.0, 1.0, 0.0, 1.0, 2.0, 1.0, 8.0]);
        assert_eq!(z.len(), lifted_dim(2, 2, LiftVariant::V2));
    }

    #[test]
    fn v3_zero_input_hits_trig_constants() {
        let n_h = 3;
        let n_o = 2;
        let z = lift(&vec![0.0; n_h], &vec![0.0; n_o], LiftVariant::V3);
        let poly = lifted_dim(n_h, n_o, LiftVariant::V2);
        assert!(z[..poly].iter().all(|&v| v == 0.0));
        let trig = &z[poly..];
        assert_eq!(trig.len(), 2 * n_h + 2 * n_o);
        assert!(trig[..n_h].iter().all(|&v| v == 1.0)); // cos x_h
        assert!(trig[n_h..2 * n_h].iter().all(|&v| v == 0.0)); // sin x_h
        assert!(trig[2 * n_h..2 * n_h + n_o].iter().all(|&v| v == 1.0)); // cos x_o
        assert!(trig[2 * n_h + n_o..].iter().all(|&v| v == 0.0)); // sin x_o
    }

    #[test]
    fn lift_starts_with_raw_robot_block() {
        let x_h = [0.3, -0.7, 1.1];
        let x_o = [2.0, 0.5];
        for v in [LiftVariant::V1, LiftVariant::V2, LiftVariant::V3] {
            let z = lift(&x_h, &x_o, v);
            assert_eq!(&z[..3], &x_h);
            assert_eq!(extract_action(&z, 3).unwrap(), &x_h);
        }
    }

    #[test]
    fn zero_encoder_outputs_final_bias() {
        let mut enc = SpectralEncoder::new(4, (8, 8), 3, InitScheme::Zeros, 0);
        let mut params = enc.params();
        params[5].data_mut().copy_from_slice(&[0.5, -1.5, 2.0]);
        enc.set_params(&params);
        for xi in [[0.0; 4], [1.0, -2.0, 3.0, -4.0]] {
            assert_eq!(enc.encode(&xi).unwrap(), vec![0.5, -1.5, 2.0]);
        }
    }

    #[test]
    fn encoder_is_deterministic_under_seed() {
        let a = SpectralEncoder::new(5, (16, 32), 8, InitScheme::UniformFanIn, 42);
        let b = SpectralEncoder::new(5, (16, 32), 8, InitScheme::UniformFanIn, 42);
        assert_eq!(a, b);
        let c = SpectralEncoder::new(5, (16, 32), 8, InitScheme::UniformFanIn, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_rejects_wrong_input_dim() {
        let enc = SpectralEncoder::new(4, (8, 8), 3, InitScheme::Zeros, 0);
        assert!(matches!(
            enc.encode(&[1.0, 2.0]),
            Err(LiftingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let enc = SpectralEncoder::new(4, (8, 16), 5, InitScheme::UniformFanIn, 7);
        let xi = [0.4, -1.2, 0.0, 2.5];
        let plain = enc.encode(&xi).unwrap();

        let mut tape = Tape::new();
        let ids: Vec<VarId> = enc.params().into_iter().map(|p| tape.leaf(p)).collect();
        let x = tape.leaf(Tensor::vector(xi.to_vec()));
        let y = SpectralEncoder::encode_on_tape(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.value(y).data(), plain.as_slice());
    }

    #[test]
    fn assemble_then_extract_roundtrips() {
        let xi = vec![1.0, 2.0, 3.0];
        let psi = vec![9.0, 8.0];
        let z = assemble_latent(&xi, &psi);
        assert_eq!(z.len(), 5);
        assert_eq!(extract_action(&z, 3).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(extract_action(&z[..2], 3).is_err());
    }
}
