//! Pipeline configuration, loadable from JSON and overridable field by field.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mechanism {
    #[default]
    Linear,
    Logistic,
    Neural,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Linear, Mechanism::Logistic, Mechanism::Neural];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Linear => "linear",
            Mechanism::Logistic => "logistic",
            Mechanism::Neural => "neural",
        }
    }

    /// Continuous labels for `linear`, binary ±1 labels otherwise.
    pub fn continuous_labels(self) -> bool {
        self == Mechanism::Linear
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Mechanism::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let allowed: Vec<&str> = Mechanism::ALL.iter().map(|m| m.as_str()).collect();
            CliError::Config(format!("unknown mechanism `{s}`; expected one of: {}", allowed.join(", ")))
        })
    }
}

impl TryFrom<String> for Mechanism {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self, CliError> {
        s.parse()
    }
}

impl From<Mechanism> for String {
    fn from(m: Mechanism) -> String {
        m.as_str().to_string()
    }
}

/// Parameters of the synthetic generator matching the mechanism.
///
/// `linear` uses `n, p, d, noise_std`; `logistic` uses `n, p, signal_strength`;
/// `neural` uses `n, side, latent` and has `side²` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub noise_std: f64,
    pub signal_strength: f64,
    pub side: usize,
    pub latent: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 200,
            p: 12,
            d: 1,
            noise_std: 0.1,
            signal_strength: 5.0,
            side: 8,
            latent: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub enabled: bool,
    pub k_nn: usize,
    /// Largest number of principal components kept before MI estimation.
    pub pca_dim: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            enabled: true,
            k_nn: capriv::privmetrics::DEFAULT_K_NN,
            pca_dim: capriv::privmetrics::MI_MAX_DIM,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// CSV of the released features.
    pub released: Option<PathBuf>,
    /// JSON report.
    pub report: Option<PathBuf>,
}

/// Everything a pipeline run needs. Unset optional fields take mechanism defaults:
///
/// * `k`: target rank for `linear`/`logistic`, holder bottleneck width for `neural`;
///   falls back to `rank_rate · p`, then to `p / 2`.
/// * `gamma`: `linear` picks a budget inside the rank-`k` interval, `logistic` uses
///   `0.25 ‖X‖_F²`, `neural` uses `0.2` times the total variance of the training rows.
/// * `beta0`: initial penalty; for `neural` it multiplies the variance-scaled base `1 / v²`.
/// * `t`: rounds of the logistic or neural game.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mechanism: Mechanism,
    pub synthetic: Option<SyntheticSpec>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub rank_rate: Option<f64>,
    pub eta: Option<f64>,
    pub beta0: Option<f64>,
    pub t: Option<usize>,
    pub seed: u64,
    pub train_fraction: Option<f64>,
    /// Min-max scale every column with ranges taken from the training rows.
    pub normalize: bool,
    /// Attacker epochs per round inside the neural game.
    pub attacker_epochs: Option<usize>,
    /// Epochs of the neural attacker trained for evaluation.
    pub eval_epochs: Option<usize>,
    pub audit: AuditConfig,
    pub output: OutputConfig,
    /// Put wall-clock seconds into the report; off keeps reports byte-identical.
    pub record_runtime: bool,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_ATTACKER_EPOCHS: usize = 10;
pub const DEFAULT_EVAL_EPOCHS: usize = 300;

fn positive(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(CliError::Config(format!("{name} must be positive and finite"))),
        _ => Ok(()),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let csv = self.features.is_some() || self.labels.is_some();
        match (&self.synthetic, csv) {
            (Some(_), true) => {
                return Err(CliError::Config(
                    "give either a synthetic spec or CSV paths, not both".into(),
                ))
            }
            (None, false) => return Err(CliError::Config("no data source: give a synthetic spec or CSV paths".into())),
            (None, true) if self.features.is_none() || self.labels.is_none() => {
                return Err(CliError::Config("CSV input needs both features and labels".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            if s.n == 0 {
                return Err(CliError::Config("synthetic n must be positive".into()));
            }
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(CliError::Config("gamma must be finite and nonnegative".into()));
            }
        }
        if self.k.is_some() && self.rank_rate.is_some() {
            return Err(CliError::Config("give k or rank_rate, not both".into()));
        }
        if self.k == Some(0) {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if let Some(r) = self.rank_rate {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CliError::Config("rank_rate must lie in (0, 1]".into()));
            }
        }
        if let Some(e) = self.eta {
            if !(e > 0.0 && e < 1.0) {
                return Err(CliError::Config("eta must lie in (0, 1)".into()));
            }
        }
        positive("beta0", self.beta0)?;
        if self.t == Some(0) {
            return Err(CliError::Config("t must be at least 1".into()));
        }
        if let Some(f) = self.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config("train_fraction must lie strictly between 0 and 1".into()));
            }
        }
        if self.mechanism != Mechanism::Neural && (self.attacker_epochs.is_some() || self.eval_epochs.is_some()) {
            return Err(CliError::Config(format!(
                "attacker_epochs and eval_epochs only apply to the neural mechanism, not {}",
                self.mechanism
            )));
        }
        if self.mechanism == Mechanism::Neural && self.eta.is_some() {
            return Err(CliError::Config("eta does not apply to the neural mechanism".into()));
        }
        if self.audit.k_nn == 0 || self.audit.pca_dim == 0 {
            return Err(CliError::Config("audit k_nn and pca_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION)
    }

    /// Target rank (or bottleneck width) for `p` features.
    pub fn resolve_k(&self, p: usize) -> usize {
        match (self.k, self.rank_rate) {
            (Some(k), _) => k,
            (None, Some(r)) => ((r * p as f64).round() as usize).max(1),
            (None, None) => (p / 2).max(1),
        }
    }
}
