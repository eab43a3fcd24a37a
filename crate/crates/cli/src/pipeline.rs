//! Data loading, mechanism dispatch, attack and audit.

use std::time::Instant;

use capriv::dataset::{gen_linear_gaussian, gen_logistic_planted, gen_planted_images, split_and_batch, FeatureMatrix, LabelSet, MinMaxRecord, SplitBatches};
use capriv::linalg::{center_columns, lstsq, select_rows, with_intercept};
use capriv::linear_game::{gamma_for_rank, run_linear_game, svd_cache, LinearGameConfig};
use capriv::logistic_game::{logistic_attack_eval, run_categorical_game, CategoricalGameConfig};
use capriv::neural_game::{
    mean_sq_distortion, nn_attack_eval, release_with, rms_per_coordinate, run_nn_game, total_variance, MlpSpec, NnGameConfig,
    Schedule,
};
use capriv::privmetrics::{mi_categorical_with, mi_continuous_with};
use capriv::seed;
use nalgebra::DMatrix;

use crate::config::{Mechanism, PipelineConfig, SyntheticSpec, DEFAULT_ATTACKER_EPOCHS, DEFAULT_EVAL_EPOCHS};
use crate::io;
use crate::report::{emit_report, AttackerMetrics, PrivacyReport, SweepRow};
use crate::CliError;

/// Module seeds are derived from the single top-level seed.
pub fn derived_seed(root: u64, label: &str) -> u64 {
    seed::derive(root, label, 0)
}

pub fn synthesize(mechanism: Mechanism, spec: &SyntheticSpec, root_seed: u64) -> Result<(FeatureMatrix, LabelSet), CliError> {
    let s = derived_seed(root_seed, "cli-synth");
    Ok(match mechanism {
        Mechanism::Linear => {
            let d = gen_linear_gaussian(spec.n, spec.p, spec.d, spec.noise_std, s)?;
            (d.features, d.labels)
        }
        Mechanism::Logistic => {
            let d = gen_logistic_planted(spec.n, spec.p, spec.signal_strength, s)?;
            (d.features, d.labels)
        }
        Mechanism::Neural => {
            let d = gen_planted_images(spec.n, spec.side, spec.latent, s)?;
            (d.features, d.labels)
        }
    })
}

/// Validated data with its train/test split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: FeatureMatrix,
    pub y: LabelSet,
    pub split: SplitBatches,
}

impl Prepared {
    pub fn train(&self) -> Result<(FeatureMatrix, LabelSet), CliError> {
        Ok((
            self.x.select_rows(&self.split.train_indices)?,
            self.y.select_rows(&self.split.train_indices),
        ))
    }
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let (x, y) = match (&cfg.synthetic, &cfg.features, &cfg.labels) {
        (Some(spec), _, _) => synthesize(cfg.mechanism, spec, cfg.seed)?,
        (None, Some(f), Some(l)) => (io::read_features(f)?, io::read_labels(l)?),
        _ => unreachable!("validate checks the data source"),
    };
    if x.nrows() != y.len() {
        return Err(CliError::Config(format!("{} feature rows but {} labels", x.nrows(), y.len())));
    }
    let continuous = matches!(y, LabelSet::Continuous(_));
    if continuous != cfg.mechanism.continuous_labels() {
        let want = if cfg.mechanism.continuous_labels() { "continuous" } else { "binary" };
        return Err(CliError::Config(format!("the {} mechanism needs {want} labels", cfg.mechanism)));
    }
    let split = split_and_batch(&x, &y, cfg.train_fraction(), x.nrows(), derived_seed(cfg.seed, "cli-split"))?;
    let x = if cfg.normalize {
        let record = MinMaxRecord::fit(&select_rows(x.values(), &split.train_indices));
        x.replace_values(record.apply(x.values()))?
    } else {
        x
    };
    Ok(Prepared { x, y, split })
}

/// A fitted mechanism applied to every row.
struct Release {
    x_tilde: FeatureMatrix,
    gamma: f64,
    k: usize,
    distortion: f64,
    relative_distortion: f64,
    effective_rank: Option<usize>,
    rank_attained: Option<bool>,
    converged: Option<bool>,
}

fn frobenius_distortion(x_tilde: &FeatureMatrix, prep: &Prepared) -> (f64, f64) {
    let rows = &prep.split.train_indices;
    let xt = select_rows(x_tilde.values(), rows);
    let x = select_rows(prep.x.values(), rows);
    let d = (&xt - &x).norm_squared();
    let scale = x.norm_squared();
    (d, if scale > 0.0 { d / scale } else { 0.0 })
}

fn release_linear(cfg: &PipelineConfig, prep: &Prepared) -> Result<Release, CliError> {
    let (xtr, ytr) = prep.train()?;
    let k = cfg.resolve_k(prep.x.ncols());
    let defaults = LinearGameConfig::new(0.0, k);
    let eta = cfg.eta.unwrap_or(defaults.eta);
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => gamma_for_rank(&svd_cache(&xtr)?, k, eta)?,
    };
    let game = LinearGameConfig {
        gamma,
        eta,
        beta0: cfg.beta0.unwrap_or(defaults.beta0),
        ..defaults
    };
    let (_, map) = run_linear_game(&xtr, &ytr, &game)?;
    // X̃ = X M XᵀX with the Gram matrix of the training rows, so test rows get the same map.
    let map_l = map.m.as_matrix() * (xtr.values().transpose() * xtr.values());
    let x_tilde = prep.x.replace_values(prep.x.values() * map_l)?;
    let (distortion, relative_distortion) = frobenius_distortion(&x_tilde, prep);
    Ok(Release {
        x_tilde,
        gamma,
        k,
        distortion,
        relative_distortion,
        effective_rank: Some(map.effective_rank),
        rank_attained: Some(map.effective_rank == k && !map.fallback),
        converged: None,
    })
}

fn release_logistic(cfg: &PipelineConfig, prep: &Prepared) -> Result<Release, CliError> {
    let (xtr, ytr) = prep.train()?;
    let k = cfg.resolve_k(prep.x.ncols());
    let gamma = cfg.gamma.unwrap_or(0.25 * xtr.values().norm_squared());
    let defaults = CategoricalGameConfig::new(gamma, k);
    let game = CategoricalGameConfig {
        eta: cfg.eta.unwrap_or(defaults.eta),
        beta0: cfg.beta0.unwrap_or(defaults.beta0),
        t: cfg.t.unwrap_or(defaults.t),
        ..defaults
    };
    let out = run_categorical_game(&xtr, &ytr, &game)?;
    let x_tilde = prep.x.replace_values(prep.x.values() * out.m_bar.as_matrix())?;
    let (distortion, relative_distortion) = frobenius_distortion(&x_tilde, prep);
    Ok(Release {
        x_tilde,
        gamma,
        k,
        distortion,
        relative_distortion,
        effective_rank: Some(out.effective_rank),
        rank_attained: Some(out.rank_attained),
        converged: None,
    })
}

fn release_neural(cfg: &PipelineConfig, prep: &Prepared) -> Result<Release, CliError> {
    let (xtr, ytr) = prep.train()?;
    let p = prep.x.ncols();
    let k = cfg.resolve_k(p);
    let v = total_variance(xtr.values());
    let gamma = cfg.gamma.unwrap_or(0.2 * v);
    let mut game = NnGameConfig::for_data(gamma, xtr.values(), derived_seed(cfg.seed, "cli-mechanism"));
    if let Some(b) = cfg.beta0 {
        let vv = v.max(f64::MIN_POSITIVE);
        game.beta = Schedule::Linear { base: b / (vv * vv) };
    }
    if let Some(t) = cfg.t {
        game.t = t;
    }
    game.attacker_epochs = cfg.attacker_epochs.unwrap_or(DEFAULT_ATTACKER_EPOCHS);
    let out = run_nn_game(&xtr, &ytr, &MlpSpec::holder(p, k), &MlpSpec::attacker(p, 2 * p), &game)?;
    let mut g = out.g_params;
    let released = release_with(&mut g, prep.x.values(), prep.y.as_binary()?)?;
    let x_tilde = prep.x.replace_values(released)?;
    let rows = &prep.split.train_indices;
    let distortion = mean_sq_distortion(&select_rows(x_tilde.values(), rows), xtr.values());
    Ok(Release {
        x_tilde,
        gamma,
        k,
        distortion,
        relative_distortion: if v > 0.0 { distortion / v } else { 0.0 },
        effective_rank: None,
        rank_attained: None,
        converged: Some(out.converged),
    })
}

/// OLS with intercept fit on the training rows, scored on both sides.
fn ols_metrics(x: &DMatrix<f64>, y: &DMatrix<f64>, split: &SplitBatches) -> Result<AttackerMetrics, CliError> {
    let design = with_intercept(x);
    let coef = lstsq(&select_rows(&design, &split.train_indices), &select_rows(y, &split.train_indices))?;
    let score = |rows: &[usize]| {
        let yr = select_rows(y, rows);
        let ss_res = (&yr - select_rows(&design, rows) * &coef).norm_squared();
        let ss_tot = center_columns(&yr).norm_squared();
        let rmse = (ss_res / yr.len() as f64).sqrt();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
        (rmse, r2)
    };
    let (train_rmse, train_r2) = score(&split.train_indices);
    let (test_rmse, test_r2) = score(&split.test_indices);
    Ok(AttackerMetrics {
        train_rmse: Some(train_rmse),
        train_r2: Some(train_r2),
        test_rmse: Some(test_rmse),
        test_r2: Some(test_r2),
        ..AttackerMetrics::default()
    })
}

/// The mechanism's attacker, trained on the training rows of `x`.
pub fn attack(cfg: &PipelineConfig, x: &FeatureMatrix, y: &LabelSet, split: &SplitBatches) -> Result<AttackerMetrics, CliError> {
    let (train, test) = match cfg.mechanism {
        Mechanism::Linear => return ols_metrics(x.values(), y.as_continuous()?, split),
        Mechanism::Logistic => {
            let m = logistic_attack_eval(x, y, split)?;
            (m.train_accuracy, m.test_accuracy)
        }
        Mechanism::Neural => {
            let p = x.ncols();
            let epochs = cfg.eval_epochs.unwrap_or(DEFAULT_EVAL_EPOCHS);
            let m = nn_attack_eval(x, y, split, &MlpSpec::attacker(p, 2 * p), epochs, derived_seed(cfg.seed, "cli-eval"))?;
            (m.train_accuracy, m.test_accuracy)
        }
    };
    Ok(AttackerMetrics {
        train_accuracy: Some(train),
        test_accuracy: Some(test),
        ..AttackerMetrics::default()
    })
}

/// `Î(X; Y)` in nats over all rows, or `None` when the audit is off.
pub fn audit(cfg: &PipelineConfig, x: &FeatureMatrix, y: &LabelSet) -> Result<Option<f64>, CliError> {
    if !cfg.audit.enabled {
        return Ok(None);
    }
    let a = &cfg.audit;
    let mi = match y {
        LabelSet::Continuous(yv) => mi_continuous_with(x.values(), yv, a.k_nn, a.pca_dim)?,
        LabelSet::Binary(_) => mi_categorical_with(x.values(), y, a.k_nn, a.pca_dim)?,
    };
    Ok(Some(mi.nats))
}

fn base_report(cfg: &PipelineConfig, prep: &Prepared) -> PrivacyReport {
    PrivacyReport {
        mechanism: cfg.mechanism,
        seed: cfg.seed,
        config: cfg.clone(),
        n_samples: prep.x.nrows(),
        n_features: prep.x.ncols(),
        n_train: prep.split.train_indices.len(),
        gamma: None,
        k: None,
        distortion: None,
        relative_distortion: None,
        rms_per_coordinate: None,
        effective_rank: None,
        rank_attained: None,
        converged: None,
        attacker: AttackerMetrics::default(),
        baseline: AttackerMetrics::default(),
        mi_before: None,
        mi_after: None,
        runtime_seconds: None,
        sweep: None,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: PrivacyReport,
    pub released: FeatureMatrix,
}

/// One run on prepared data; writes nothing.
pub fn run_prepared(cfg: &PipelineConfig, prep: &Prepared) -> Result<RunOutput, CliError> {
    let rel = match cfg.mechanism {
        Mechanism::Linear => release_linear(cfg, prep)?,
        Mechanism::Logistic => release_logistic(cfg, prep)?,
        Mechanism::Neural => release_neural(cfg, prep)?,
    };
    let rows = &prep.split.train_indices;
    let rms = rms_per_coordinate(&select_rows(rel.x_tilde.values(), rows), &select_rows(prep.x.values(), rows));
    let report = PrivacyReport {
        gamma: Some(rel.gamma),
        k: Some(rel.k),
        distortion: Some(rel.distortion),
        relative_distortion: Some(rel.relative_distortion),
        rms_per_coordinate: Some(rms),
        effective_rank: rel.effective_rank,
        rank_attained: rel.rank_attained,
        converged: rel.converged,
        attacker: attack(cfg, &rel.x_tilde, &prep.y, &prep.split)?,
        baseline: attack(cfg, &prep.x, &prep.y, &prep.split)?,
        mi_before: audit(cfg, &prep.x, &prep.y)?,
        mi_after: audit(cfg, &rel.x_tilde, &prep.y)?,
        ..base_report(cfg, prep)
    };
    report.ensure_finite()?;
    Ok(RunOutput {
        report,
        released: rel.x_tilde,
    })
}

/// Run and write the configured artifacts.
pub fn execute(cfg: &PipelineConfig) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let mut out = run_prepared(cfg, &prep)?;
    if cfg.record_runtime {
        out.report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    }
    if let Some(path) = &cfg.output.released {
        io::write_features(path, &out.released)?;
    }
    if let Some(path) = &cfg.output.report {
        emit_report(&out.report, path)?;
    }
    Ok(out)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PrivacyReport, CliError> {
    execute(cfg).map(|o| o.report)
}

/// Grid over `ks × gammas`; an empty list keeps the configured (or default) value.
///
/// Released features are not written. The report carries one [`SweepRow`] per point
/// and is written with its CSV table when `output.report` is set.
pub fn run_sweep(cfg: &PipelineConfig, gammas: &[f64], ks: &[usize]) -> Result<PrivacyReport, CliError> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let gs: Vec<Option<f64>> = if gammas.is_empty() { vec![cfg.gamma] } else { gammas.iter().copied().map(Some).collect() };
    let kk: Vec<Option<usize>> = if ks.is_empty() { vec![None] } else { ks.iter().copied().map(Some).collect() };
    let mut rows = Vec::with_capacity(gs.len() * kk.len());
    for k in &kk {
        for g in &gs {
            let mut point = cfg.clone();
            point.gamma = *g;
            if let Some(k) = k {
                point.k = Some(*k);
                point.rank_rate = None;
            }
            point.validate()?;
            let r = run_prepared(&point, &prep)?.report;
            rows.push(SweepRow {
                gamma: r.gamma.unwrap_or_default(),
                k: r.k.unwrap_or_default(),
                distortion: r.distortion.unwrap_or_default(),
                attacker_metric: r.attacker.headline().unwrap_or_default(),
                mi_after: r.mi_after,
            });
        }
    }
    let mut report = PrivacyReport {
        sweep: Some(rows),
        ..base_report(cfg, &prep)
    };
    if cfg.record_runtime {
        report.runtime_seconds = Some(start.elapsed().as_secs_f64());
    }
    report.ensure_finite()?;
    if let Some(path) = &cfg.output.report {
        emit_report(&report, path)?;
    }
    Ok(report)
}
