//! The JSON report and the sweep table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Mechanism, PipelineConfig};
use crate::io::{fmt_f64, write_table, write_text};
use crate::CliError;

/// Attacker scores on the training and test rows. Regression fields are set for the
/// linear mechanism, accuracies for the categorical ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackerMetrics {
    pub train_rmse: Option<f64>,
    pub train_r2: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_r2: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl AttackerMetrics {
    /// Test R² for regression, test accuracy otherwise.
    pub fn headline(&self) -> Option<f64> {
        self.test_r2.or(self.test_accuracy)
    }

    fn values(&self) -> [Option<f64>; 6] {
        [
            self.train_rmse,
            self.train_r2,
            self.train_accuracy,
            self.test_rmse,
            self.test_r2,
            self.test_accuracy,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub k: usize,
    pub distortion: f64,
    pub attacker_metric: f64,
    pub mi_after: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 5] = ["gamma", "k", "distortion", "attacker_metric", "mi_after"];

/// Every key is always present; fields that do not apply are `null`.
///
/// `distortion` is measured on the training rows the mechanism was fit on:
/// `‖X̃ − X‖_F²` for the linear and logistic mechanisms, the mean squared per-sample
/// distance for the neural one. A sweep report leaves the per-run fields `null` and
/// lists one row per grid point in `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub config: PipelineConfig,
    pub n_samples: usize,
    pub n_features: usize,
    pub n_train: usize,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub distortion: Option<f64>,
    pub relative_distortion: Option<f64>,
    /// Root mean squared change per entry on the training rows.
    pub rms_per_coordinate: Option<f64>,
    pub effective_rank: Option<usize>,
    pub rank_attained: Option<bool>,
    pub converged: Option<bool>,
    pub attacker: AttackerMetrics,
    /// The same attacker on the original features.
    pub baseline: AttackerMetrics,
    pub mi_before: Option<f64>,
    pub mi_after: Option<f64>,
    pub runtime_seconds: Option<f64>,
    pub sweep: Option<Vec<SweepRow>>,
}

impl PrivacyReport {
    pub fn ensure_finite(&self) -> Result<(), CliError> {
        let mut all: Vec<Option<f64>> = vec![
            self.gamma,
            self.distortion,
            self.relative_distortion,
            self.rms_per_coordinate,
            self.mi_before,
            self.mi_after,
            self.runtime_seconds,
        ];
        all.extend(self.attacker.values());
        all.extend(self.baseline.values());
        for row in self.sweep.iter().flatten() {
            all.extend([Some(row.gamma), Some(row.distortion), Some(row.attacker_metric), row.mi_after]);
        }
        if all.into_iter().flatten().any(|v| !v.is_finite()) {
            return Err(CliError::Numeric("report contains a non-finite value".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        self.ensure_finite()?;
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Numeric(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn sweep_rows(&self) -> Vec<Vec<String>> {
        self.sweep
            .iter()
            .flatten()
            .map(|r| {
                vec![
                    fmt_f64(r.gamma),
                    r.k.to_string(),
                    fmt_f64(r.distortion),
                    fmt_f64(r.attacker_metric),
                    r.mi_after.map(fmt_f64).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

/// Path of the sweep table written next to a report.
pub fn sweep_csv_path(report_path: &Path) -> PathBuf {
    report_path.with_extension("csv")
}

/// Pretty JSON at `path`; for sweeps also the table at [`sweep_csv_path`].
pub fn emit_report(report: &PrivacyReport, path: &Path) -> Result<(), CliError> {
    write_text(path, &report.to_json()?)?;
    if report.sweep.is_some() {
        write_table(&sweep_csv_path(path), &SWEEP_COLUMNS, &report.sweep_rows())?;
    }
    Ok(())
}
