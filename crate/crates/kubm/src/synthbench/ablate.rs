//! Four-way training ablation over initialization and learning-rate split.
//!
//! The grid crosses identity initialization of the transition matrix
//! against giving the matrix its own (smaller) learning rate. Single-rate
//! configurations train the matrix at the encoder's rate.

use crate::koopman::{train, TrainConfig, TrainError, TrainRecord};
use crate::trajdata::Dataset;
use serde::{Deserialize, Serialize};

pub const ABLATION_LABELS: [&str; 4] = [
    "identity+separate",
    "separate-only",
    "identity-only",
    "neither",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub record: TrainRecord,
}

impl AblationRun {
    pub fn final_loss(&self) -> f64 {
        *self.record.loss_curve.last().unwrap()
    }

    pub fn spectral_range(&self) -> (f64, f64) {
        let lo = self.record.spectral_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .record
            .spectral_curve
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// Label of the run with the lowest final loss.
    pub fn best_label(&self) -> &str {
        let best = self
            .runs
            .iter()
            .min_by(|a, b| a.final_loss().total_cmp(&b.final_loss()))
            .expect("report holds four runs");
        &best.label
    }

    /// Per-epoch loss and spectral radius of all runs, side by side.
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch");
        for run in &self.runs {
            out.push_str(&format!(",{0}_loss,{0}_rho", run.label));
        }
        out.push('\n');
        let epochs = self.runs[0].record.loss_curve.len();
        for e in 0..epochs {
            out.push_str(&e.to_string());
            for run in &self.runs {
                out.push_str(&format!(
                    ",{},{}",
                    run.record.loss_curve[e], run.record.spectral_curve[e]
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// The four configurations derived from a base config, in report order.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    ABLATION_LABELS
        .iter()
        .map(|&label| {
            let mut cfg = base.clone();
            cfg.identity_init = label.starts_with("identity");
            let separate = label.contains("separate");
            if !separate {
                cfg.koopman_lr = cfg.encoder_lr;
            }
            (label.to_string(), cfg)
        })
        .collect()
}

/// Trains all four variants on the same dataset and collects their curves.
pub fn ablation_suite(data: &Dataset, base: &TrainConfig) -> Result<AblationReport, TrainError> {
    let mut runs = Vec::with_capacity(4);
    for (label, cfg) in ablation_variants(base) {
        let model = train(data, &cfg)?;
        let record = model
            .train_record
            .expect("train always attaches its record");
        runs.push(AblationRun { label, record });
    }
    let len = runs[0].record.loss_curve.len();
    debug_assert!(runs
        .iter()
        .all(|r| r.record.loss_curve.len() == len && r.record.spectral_curve.len() == len));
    Ok(AblationReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::env::{generate_demos, DemoSpec, EnvKind, ObsFamily};

    fn tiny_dataset() -> Dataset {
        let spec = DemoSpec {
            kind: EnvKind::LinearCoupled,
            family: ObsFamily::Vector,
            count: 3,
            steps: 12,
            eps_task: 0.35,
            seed: 77,
        };
        let mut data = generate_demos(&spec).unwrap();
        data.augment_all().unwrap();
        data
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            encoder_lr: 1e-3,
            koopman_lr: 1e-4,
            horizon: 4,
            epochs: 3,
            batch_size: 16,
            hidden: (8, 8),
            psi_dim: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variants_cover_the_grid() {
        let vs = ablation_variants(&tiny_config());
        assert_eq!(vs.len(), 4);
        assert!(vs[0].1.identity_init && vs[0].1.koopman_lr != vs[0].1.encoder_lr);
        assert!(!vs[1].1.identity_init && vs[1].1.koopman_lr != vs[1].1.encoder_lr);
        assert!(vs[2].1.identity_init && vs[2].1.koopman_lr == vs[2].1.encoder_lr);
        assert!(!vs[3].1.identity_init && vs[3].1.koopman_lr == vs[3].1.encoder_lr);
    }

    #[test]
    fn suite_runs_four_equal_length_curves() {
        let data = tiny_dataset();
        let cfg = tiny_config();
        let report = ablation_suite(&data, &cfg).unwrap();
        assert_eq!(report.runs.len(), 4);
        for run in &report.runs {
            assert_eq!(run.record.loss_curve.len(), cfg.epochs + 1);
            assert_eq!(run.record.spectral_curve.len(), cfg.epochs + 1);
        }
        // Identity-initialized runs open at spectral radius exactly 1.
        assert_eq!(report.runs[0].record.spectral_curve[0], 1.0);
        assert_eq!(report.runs[2].record.spectral_curve[0], 1.0);

        let csv = report.csv();
        assert_eq!(csv.lines().count(), cfg.epochs + 2);
        assert!(csv.starts_with("epoch,identity+separate_loss,identity+separate_rho"));
    }
}
