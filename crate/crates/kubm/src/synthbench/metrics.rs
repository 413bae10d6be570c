//! Prediction-quality curves over normalized rollout time.
//!
//! Rollouts have different lengths, so each frame is assigned to the
//! nearest of `bins` percentile bins and per-bin statistics are pooled.
//! Frames without an observation (blackouts) leave gaps; empty bins take
//! the previous bin's value so every curve has exactly `bins` entries.

use super::env::{BenchError, EpisodeResult};

pub const DEFAULT_BINS: usize = 100;

/// Nearest percentile bin for frame `t` of a `total`-frame rollout.
pub fn bin_of(t: usize, total: usize, bins: usize) -> usize {
    if total <= 1 || bins <= 1 {
        return 0;
    }
    let x = t as f64 * (bins - 1) as f64 / (total - 1) as f64;
    (x.round() as usize).min(bins - 1)
}

/// Point-set prediction trace of one rollout. `observed[t]` is `None` on
/// frames where the observation was blacked out.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrace {
    pub success: bool,
    pub predicted: Vec<Vec<[f64; 2]>>,
    pub observed: Vec<Option<Vec<[f64; 2]>>>,
}

/// Feature-vector prediction trace of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrace {
    pub predicted: Vec<Vec<f64>>,
    pub observed: Vec<Option<Vec<f64>>>,
}

/// RMSE-versus-percentile curves, split by episode outcome. A side is
/// `None` when no episode of that outcome contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileCurves {
    pub bins: usize,
    pub success: Option<Vec<f64>>,
    pub failure: Option<Vec<f64>>,
}

/// A feature vector viewed as 2-D points, for vector-family rollouts
/// where no raw flow exists. Odd trailing coordinates pair with zero.
pub fn feature_points(f: &[f64]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = f.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    if f.len() % 2 == 1 {
        pts.push([f[f.len() - 1], 0.0]);
    }
    pts
}

/// Point traces extracted from episode telemetry: raw flow where the
/// episode recorded it, feature vectors reinterpreted as points otherwise.
pub fn point_traces(results: &[EpisodeResult]) -> Vec<PointTrace> {
    results
        .iter()
        .map(|r| {
            let mut predicted = Vec::with_capacity(r.eval.len());
            let mut observed = Vec::with_capacity(r.eval.len());
            for frame in &r.eval {
                match (&frame.pred_points, &frame.true_points) {
                    (Some(p), t) => {
                        predicted.push(p.clone());
                        observed.push(t.clone());
                    }
                    _ => {
                        predicted.push(feature_points(&frame.pred_feature));
                        observed.push(frame.obs_feature.as_deref().map(feature_points));
                    }
                }
            }
            PointTrace {
                success: r.success,
                predicted,
                observed,
            }
        })
        .collect()
}

pub fn feature_traces(results: &[EpisodeResult]) -> Vec<FeatureTrace> {
    results
        .iter()
        .map(|r| FeatureTrace {
            predicted: r.eval.iter().map(|f| f.pred_feature.clone()).collect(),
            observed: r.eval.iter().map(|f| f.obs_feature.clone()).collect(),
        })
        .collect()
}

fn fill_gaps(curve: &mut [f64], filled: &[bool]) -> bool {
    let first = match filled.iter().position(|&f| f) {
        Some(i) => i,
        None => return false,
    };
    for i in 0..first {
        curve[i] = curve[first];
    }
    for i in first + 1..curve.len() {
        if !filled[i] {
            curve[i] = curve[i - 1];
        }
    }
    true
}

/// Per-bin RMSE over predicted points against observed points, averaged
/// across rollouts, with successful and failed rollouts reported as
/// separate curves.
pub fn rmse_by_percentile(
    traces: &[PointTrace],
    bins: usize,
) -> Result<PercentileCurves, BenchError> {
    if bins == 0 {
        return Err(BenchError::BadSpec("bin count must be at least 1".into()));
    }
    let mut acc: [Option<(Vec<f64>, usize)>; 2] = [None, None];
    for trace in traces {
        if trace.predicted.len() != trace.observed.len() {
            return Err(BenchError::BadSpec(format!(
                "trace has {} predicted frames but {} observed",
                trace.predicted.len(),
                trace.observed.len()
            )));
        }
        let total = trace.predicted.len();
        let mut sq = vec![0.0f64; bins];
        let mut n = vec![0usize; bins];
        for t in 0..total {
            let obs = match &trace.observed[t] {
                Some(o) => o,
                None => continue,
            };
            let pred = &trace.predicted[t];
            if pred.len() != obs.len() {
                return Err(BenchError::BadSpec(format!(
                    "frame {t} has {} predicted points but {} observed",
                    pred.len(),
                    obs.len()
                )));
            }
            let b = bin_of(t, total, bins);
            for (p, o) in pred.iter().zip(obs) {
                sq[b] += (p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2);
                n[b] += 1;
            }
        }
        let mut curve = vec![0.0f64; bins];
        let mut filled = vec![false; bins];
        for b in 0..bins {
            if n[b] > 0 {
                curve[b] = (sq[b] / n[b] as f64).sqrt();
                filled[b] = true;
            }
        }
        if !fill_gaps(&mut curve, &filled) {
            continue;
        }
        let slot = &mut acc[trace.success as usize];
        match slot {
            None => *slot = Some((curve, 1)),
            Some((sum, count)) => {
                for (s, c) in sum.iter_mut().zip(&curve) {
                    *s += c;
                }
                *count += 1;
            }
        }
    }
    let mean = |slot: Option<(Vec<f64>, usize)>| {
        slot.map(|(sum, count)| sum.into_iter().map(|s| s / count as f64).collect())
    };
    let [failure, success] = acc;
    Ok(PercentileCurves {
        bins,
        success: mean(success),
        failure: mean(failure),
    })
}

/// Fraction of bins where the failure curve is at least the success curve.
pub fn domination_fraction(curves: &PercentileCurves) -> Option<f64> {
    let (s, f) = (curves.success.as_ref()?, curves.failure.as_ref()?);
    let wins = s.iter().zip(f).filter(|(s, f)| f >= s).count();
    Some(wins as f64 / s.len() as f64)
}

/// Per-percentile mean cosine similarity between predicted and observed
/// features, pooled across rollouts. Zero-norm frames are skipped.
pub fn cosine_curve(traces: &[FeatureTrace], bins: usize) -> Result<Vec<f64>, BenchError> {
    if bins == 0 {
        return Err(BenchError::BadSpec("bin count must be at least 1".into()));
    }
    let mut sum = vec![0.0f64; bins];
    let mut n = vec![0usize; bins];
    for trace in traces {
        if trace.predicted.len() != trace.observed.len() {
            return Err(BenchError::BadSpec(format!(
                "trace has {} predicted frames but {} observed",
                trace.predicted.len(),
                trace.observed.len()
            )));
        }
        let total = trace.predicted.len();
        for t in 0..total {
            let obs = match &trace.observed[t] {
                Some(o) => o,
                None => continue,
            };
            let pred = &trace.predicted[t];
            if pred.len() != obs.len() {
                return Err(BenchError::BadSpec(format!(
                    "frame {t} has {} predicted coordinates but {} observed",
                    pred.len(),
                    obs.len()
                )));
            }
            let dot: f64 = pred.iter().zip(obs).map(|(a, b)| a * b).sum();
            let np: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
            let no: f64 = obs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np == 0.0 || no == 0.0 {
                continue;
            }
            let b = bin_of(t, total, bins);
            sum[b] += dot / (np * no);
            n[b] += 1;
        }
    }
    let mut curve = vec![0.0f64; bins];
    let mut filled = vec![false; bins];
    for b in 0..bins {
        if n[b] > 0 {
            curve[b] = sum[b] / n[b] as f64;
            filled[b] = true;
        }
    }
    if !fill_gaps(&mut curve, &filled) {
        return Err(BenchError::BadSpec(
            "no frame contributed to the cosine curve".into(),
        ));
    }
    Ok(curve)
}

/// CSV with the success/failure RMSE curves side by side.
pub fn curves_csv(curves: &PercentileCurves) -> String {
    let mut out = String::from("bin,success_rmse,failure_rmse\n");
    for b in 0..curves.bins {
        out.push_str(&b.to_string());
        for side in [&curves.success, &curves.failure] {
            match side {
                Some(c) => out.push_str(&format!(",{}", c[b])),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// CSV with a single named per-bin curve.
pub fn curve_csv(name: &str, curve: &[f64]) -> String {
    let mut out = format!("bin,{name}\n");
    for (b, v) in curve.iter().enumerate() {
        out.push_str(&format!("{b},{v}\n"));
    }
    out
}
