//! Operator-level numerics: closed-form fitting, the multi-step coherence
//! objective, and spectral radius.

use crate::gradkit::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpsError {
    #[error("no state pairs to fit")]
    EmptyPairs,
    #[error("pair {index} has dimension {got}, expected {expected}")]
    PairDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("ridge strength must be finite and non-negative, got {0}")]
    BadRidge(f64),
    #[error("pseudo-inverse failed: {0}")]
    PseudoInverse(&'static str),
    #[error("ridge normal equations are singular")]
    SingularNormalEquations,
    #[error("trajectory of {frames} frames yields no anchors for horizon {horizon}")]
    NoAnchors { frames: usize, horizon: usize },
    #[error("spectral radius did not converge within {iterations} iterations; last estimate {last_estimate}")]
    SpectralNonConvergence {
        iterations: usize,
        last_estimate: f64,
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Least-squares fit of the transition matrix from one-step latent pairs:
/// minimizes the summed squared residual of `K z_t - z_{t+1}` over all
/// pairs. With `ridge == 0` the minimum-Frobenius-norm solution is taken
/// via a pseudo-inverse whose singular-value cutoff is
/// `sigma_max * d * machine_epsilon`; rank-deficient directions therefore
/// contribute nothing, and all-zero data yields the zero matrix. A positive
/// `ridge` solves the Tikhonov-regularized normal equations instead.
pub fn fit_edmd(pairs: &[(Vec<f64>, Vec<f64>)], ridge: f64) -> Result<Tensor, OpsError> {
    if pairs.is_empty() {
        return Err(OpsError::EmptyPairs);
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(OpsError::BadRidge(ridge));
    }
    let d = pairs[0].0.len();
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.len() != d || y.len() != d {
            return Err(OpsError::PairDimension {
                index: i,
                got: if x.len() != d { x.len() } else { y.len() },
                expected: d,
            });
        }
    }
    let n = pairs.len();
    let z = DMatrix::from_fn(d, n, |r, c| pairs[c].0[r]);
    let y = DMatrix::from_fn(d, n, |r, c| pairs[c].1[r]);

    let k = if ridge == 0.0 {
        let svd = z.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let cutoff = sigma_max * d as f64 * f64::EPSILON;
        let z_pinv = svd.pseudo_inverse(cutoff).map_err(OpsError::PseudoInverse)?;
        y * z_pinv
    } else {
        // K^T solves (Z Z^T + ridge I) K^T = Z Y^T.
        let mut gram = &z * z.transpose();
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or(OpsError::SingularNormalEquations)?;
        let kt = chol.solve(&(&z * y.transpose()));
        kt.transpose()
    };
    let data: Vec<f64> = (0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| k[(r, c)])
        .collect();
    Ok(Tensor::matrix(d, d, data))
}

/// Builds one-step pairs from per-demonstration latent sequences without
/// ever pairing across a demonstration boundary.
pub fn latent_pairs(latents_per_demo: &[Vec<Vec<f64>>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut pairs = Vec::new();
    for demo in latents_per_demo {
        for w in demo.windows(2) {
            pairs.push((w[0].clone(), w[1].clone()));
        }
    }
    pairs
}

/// Multi-step prediction error of `k` along one latent trajectory: the mean
/// over anchors `t` of `sum_{l=1..h_t} ||K^l z_t - z_{t+l}||^2`.
///
/// With `truncate_tail` the horizon shrinks to what the trajectory can
/// supply (`h_t = min(horizon, T-1-t)`), so every frame but the last acts
/// as an anchor; otherwise anchors stop where a full horizon no longer
/// fits.
pub fn coherence_loss(
    k: &Tensor,
    latents: &[Vec<f64>],
    horizon: usize,
    truncate_tail: bool,
) -> Result<f64, OpsError> {
    assert!(horizon >= 1, "horizon must be at least 1");
    let t_max = latents.len();
    let anchors = anchor_horizons(t_max, horizon, truncate_tail);
    if anchors.is_empty() {
        return Err(OpsError::NoAnchors {
            frames: t_max,
            horizon,
        });
    }
    let d = k.shape()[0];
    let kd = k.data();
    let mut total = 0.0;
    let mut w = vec![0.0; d];
    let mut next = vec![0.0; d];
    for &(t, h) in &anchors {
        w.copy_from_slice(&latents[t]);
        for l in 1..=h {
            for i in 0..d {
                let row = &kd[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    acc += row[j] * w[j];
                }
                next[i] = acc;
            }
            std::mem::swap(&mut w, &mut next);
            let target = &latents[t + l];
            let mut err = 0.0;
            for i in 0..d {
                let diff = w[i] - target[i];
                err += diff * diff;
            }
            total += err;
        }
    }
    Ok(total / anchors.len() as f64)
}

/// Anchor indices and their effective horizons for a trajectory of
/// `frames` latents.
pub fn anchor_horizons(frames: usize, horizon: usize, truncate_tail: bool) -> Vec<(usize, usize)> {
    if frames < 2 {
        return Vec::new();
    }
    let mut anchors = Vec::new();
    for t in 0..frames - 1 {
        let available = frames - 1 - t;
        if truncate_tail {
            anchors.push((t, horizon.min(available)));
        } else if available >= horizon {
            anchors.push((t, horizon));
        }
    }
    anchors
}

/// Mean coherence loss with anchors pooled across demonstrations, used for
/// epoch-level reporting so every configuration is scored on the same set.
pub fn pooled_coherence_loss(
    k: &Tensor,
    latents_per_demo: &[Vec<Vec<f64>>],
    horizon: usize,
    truncate_tail: bool,
) -> Result<f64, OpsError> {
    let d = k.shape()[0];
    let kd = k.data();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut w = vec![0.0; d];
    let mut next = vec![0.0; d];
    for latents in latents_per_demo {
        for (t, h) in anchor_horizons(latents.len(), horizon, truncate_tail) {
            w.copy_from_slice(&latents[t]);
            for l in 1..=h {
                for i in 0..d {
                    let row = &kd[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += row[j] * w[j];
                    }
                    next[i] = acc;
                }
                std::mem::swap(&mut w, &mut next);
                let target = &latents[t + l];
                let mut err = 0.0;
                for i in 0..d {
                    let diff = w[i] - target[i];
                    err += diff * diff;
                }
                total += err;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(OpsError::NoAnchors {
            frames: latents_per_demo.first().map_or(0, |l| l.len()),
            horizon,
        });
    }
    Ok(total / count as f64)
}

const SPECTRAL_EIGENSOLVE_MAX_DIM: usize = 64;
const SPECTRAL_ITERATION_CAP: usize = 20_000;
const SPECTRAL_TOL: f64 = 1e-9;

/// Largest eigenvalue modulus of a square matrix.
///
/// Matrices up to side 64 go through a dense eigensolve; larger ones use
/// orthogonal (block power) iteration with block size 2, retried at block
/// size 6 when a tight eigenvalue cluster stalls convergence.
pub fn spectral_radius(k: &Tensor) -> Result<f64, OpsError> {
    let shape = k.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(OpsError::NotSquare {
            rows: shape.first().copied().unwrap_or(0),
            cols: shape.get(1).copied().unwrap_or(0),
        });
    }
    let d = shape[0];
    if d == 0 {
        return Ok(0.0);
    }
    let m = DMatrix::from_row_slice(d, d, k.data());
    if d <= SPECTRAL_EIGENSOLVE_MAX_DIM {
        let eigs = m.complex_eigenvalues();
        return Ok(eigs.iter().map(|c| c.norm()).fold(0.0, f64::max));
    }
    match orthogonal_iteration(&m, 2) {
        Ok(rho) => Ok(rho),
        Err(_) => orthogonal_iteration(&m, 6),
    }
}

fn orthogonal_iteration(m: &DMatrix<f64>, block: usize) -> Result<f64, OpsError> {
    let d = m.nrows();
    let p = block.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bec7a11);
    let mut q = DMatrix::from_fn(d, p, |_, _| {
        use rand::Rng;
        rng.gen_range(-1.0..1.0)
    });
    q = DMatrix::from(q.qr().q());

    let mut prev = f64::INFINITY;
    let mut stable = 0usize;
    let mut last = 0.0;
    for it in 0..SPECTRAL_ITERATION_CAP {
        let z = m * &q;
        if z.norm() == 0.0 {
            return Ok(0.0);
        }
        q = DMatrix::from(z.qr().q());
        let b = q.transpose() * m * &q;
        let rho = b
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        last = rho;
        if (rho - prev).abs() <= SPECTRAL_TOL * rho.abs().max(1.0) {
            stable += 1;
            if stable >= 3 {
                return Ok(rho);
            }
        } else {
            stable = 0;
        }
        prev = rho;
        let _ = it;
    }
    Err(OpsError::SpectralNonConvergence {
        iterations: SPECTRAL_ITERATION_CAP,
        last_estimate: last,
    })
}
