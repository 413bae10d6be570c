//! Wall-clock cost of one policy query.
//!
//! A query is the latent advance plus the action slice; lifting raw
//! observations into the latent is feature extraction and stays outside
//! the timed region. Latents are renormalized between timed steps so a
//! contracting or expanding model cannot drift into denormals or
//! overflow, which would distort the arithmetic being measured.

use crate::koopman::{KoopmanModel, ModelError};
use std::hint::black_box;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub queries: usize,
}

pub fn timing_probe(
    model: &KoopmanModel,
    episodes: usize,
    steps_per_episode: usize,
) -> Result<TimingStats, ModelError> {
    let d_z = model.dims.d_z;
    let mut samples_ms = Vec::with_capacity(episodes * steps_per_episode);
    for ep in 0..episodes {
        let scale = 1.0 / (d_z as f64).sqrt();
        let mut z: Vec<f64> = (0..d_z)
            .map(|i| scale * (1.0 + ((ep + i) % 7) as f64 * 0.1))
            .collect();
        for _ in 0..steps_per_episode {
            let start = Instant::now();
            let next = model.step_latent(black_box(&z))?;
            let action = model.action_of(&next)?;
            black_box(action);
            samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
            z = next;
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(1e-6..=1e6).contains(&norm) {
                let fix = if norm > 0.0 && norm.is_finite() { 1.0 / norm } else { 0.0 };
                for v in &mut z {
                    *v *= fix;
                    if !v.is_finite() {
                        *v = scale;
                    }
                }
            }
        }
    }
    let n = samples_ms.len();
    if n == 0 {
        return Ok(TimingStats {
            mean_ms: 0.0,
            std_ms: 0.0,
            queries: 0,
        });
    }
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(TimingStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        queries: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkit::Tensor;
    use crate::koopman::{KoopmanModel, LatentMap, ModelDims};
    use crate::lifting::{InitScheme, SpectralEncoder};

    fn probe_model(d_z: usize) -> KoopmanModel {
        let d_q = 2;
        let d_f = 4;
        let d_g = 2;
        let xi = d_q + d_f + d_g;
        let enc = SpectralEncoder::new(xi, (8, 8), d_z - xi, InitScheme::Zeros, 0);
        KoopmanModel {
            dims: ModelDims { d_q, d_f, d_g, d_z },
            map: LatentMap::Mlp(enc),
            k: Tensor::eye(d_z),
            rescale: 1.0,
            horizon: 15,
            flow_codec: None,
            train_record: None,
        }
    }

    #[test]
    fn probe_counts_every_query() {
        let model = probe_model(40);
        let stats = timing_probe(&model, 3, 50).unwrap();
        assert_eq!(stats.queries, 150);
        assert!(stats.mean_ms > 0.0);
        assert!(stats.std_ms >= 0.0);
    }

    #[test]
    fn repeated_probes_agree_within_half() {
        let model = probe_model(64);
        // Warm up caches so the first probe is not penalized.
        let _ = timing_probe(&model, 1, 200).unwrap();
        let a = timing_probe(&model, 5, 2000).unwrap();
        let b = timing_probe(&model, 5, 2000).unwrap();
        let rel = (a.mean_ms - b.mean_ms).abs() / a.mean_ms.max(b.mean_ms);
        assert!(rel < 0.5, "probe means diverged: {} vs {}", a.mean_ms, b.mean_ms);
    }
}
