use std::path::PathBuf;
use std::process::ExitCode;

use capriv::powerfeat::{extract_power_features, FEATURE_NAMES};
use capriv_cli::config::{Mechanism, PipelineConfig, SyntheticSpec};
use capriv_cli::pipeline::{attack, audit, execute, run_sweep, synthesize};
use capriv_cli::{io, CliError};
use capriv::dataset::FeatureMatrix;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "capriv", version, about = "Privatize features against label inference and audit the release")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature CSV and label CSV.
    Synth(SynthArgs),
    /// Turn long-format power readings into the 23 consumption features.
    Featurize(FeaturizeArgs),
    /// Fit a mechanism, release X̃ and write the report.
    Privatize(PipelineArgs),
    /// Score the mechanism's attacker on a feature CSV.
    Attack(AttackArgs),
    /// Estimate the mutual information between features and labels.
    Audit(AuditArgs),
    /// Run a grid of gamma and/or k values.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct SynthFlags {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
}

impl SynthFlags {
    fn any(&self) -> bool {
        self.n.is_some()
            || self.p.is_some()
            || self.d.is_some()
            || self.noise_std.is_some()
            || self.signal_strength.is_some()
            || self.side.is_some()
            || self.latent.is_some()
    }

    fn apply(&self, spec: &mut SyntheticSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { spec.$f = v; } )* };
        }
        set!(n, p, d, noise_std, signal_strength, side, latent);
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "linear")]
    mechanism: String,
    #[command(flatten)]
    spec: SynthFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    features_out: PathBuf,
    #[arg(long)]
    labels_out: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// `household_id,timestamp,kw` CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Household ids in output row order.
    #[arg(long)]
    ids_out: Option<PathBuf>,
}

/// Flags mirror the JSON config fields; any flag given overrides the file.
#[derive(Args, Clone, Default)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    synthetic: SynthFlags,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rank_rate: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    attacker_epochs: Option<usize>,
    #[arg(long)]
    eval_epochs: Option<usize>,
    #[arg(long)]
    k_nn: Option<usize>,
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Min-max scale features with training-row ranges.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    no_audit: bool,
    #[arg(long)]
    released: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    record_runtime: bool,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_json(&io::read_text(path)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = &self.mechanism {
            cfg.mechanism = m.parse()?;
        }
        if self.features.is_some() || self.labels.is_some() {
            cfg.synthetic = None;
            cfg.features = self.features.clone().or(cfg.features);
            cfg.labels = self.labels.clone().or(cfg.labels);
        }
        if self.synthetic.any() {
            let mut spec = cfg.synthetic.take().unwrap_or_default();
            self.synthetic.apply(&mut spec);
            cfg.synthetic = Some(spec);
        }
        macro_rules! opt {
            ($($f:ident),*) => { $( if self.$f.is_some() { cfg.$f = self.$f; } )* };
        }
        opt!(gamma, eta, beta0, t, train_fraction, attacker_epochs, eval_epochs);
        if self.k.is_some() {
            cfg.k = self.k;
            cfg.rank_rate = None;
        }
        if self.rank_rate.is_some() {
            cfg.rank_rate = self.rank_rate;
            cfg.k = None;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k_nn {
            cfg.audit.k_nn = k;
        }
        if let Some(d) = self.pca_dim {
            cfg.audit.pca_dim = d;
        }
        if self.no_audit {
            cfg.audit.enabled = false;
        }
        if self.released.is_some() {
            cfg.output.released = self.released.clone();
        }
        if self.report.is_some() {
            cfg.output.report = self.report.clone();
        }
        cfg.normalize |= self.normalize;
        cfg.record_runtime |= self.record_runtime;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    mechanism: String,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    eval_epochs: Option<usize>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = capriv::privmetrics::DEFAULT_K_NN)]
    k_nn: usize,
    #[arg(long, default_value_t = capriv::privmetrics::MI_MAX_DIM)]
    pca_dim: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    /// Comma-separated ranks.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let mechanism: Mechanism = a.mechanism.parse()?;
            let mut spec = SyntheticSpec::default();
            a.spec.apply(&mut spec);
            let (x, y) = synthesize(mechanism, &spec, a.seed)?;
            io::write_features(&a.features_out, &x)?;
            io::write_labels(&a.labels_out, &y)?;
        }
        Command::Featurize(a) => {
            let series = io::read_power(&a.input)?;
            let rows: Vec<f64> = series.iter().flat_map(|s| extract_power_features(s).0).collect();
            let values = DMatrix::from_row_slice(series.len(), FEATURE_NAMES.len(), &rows);
            let names = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
            io::write_features(&a.output, &FeatureMatrix::with_names(values, names)?)?;
            if let Some(path) = &a.ids_out {
                let ids: Vec<String> = series.iter().map(|s| s.household_id().to_string()).collect();
                io::write_ids(path, &ids)?;
            }
        }
        Command::Privatize(a) => {
            let cfg = a.resolve()?;
            let out = execute(&cfg)?;
            if cfg.output.report.is_none() {
                print!("{}", out.report.to_json()?);
            }
        }
        Command::Attack(a) => {
            let cfg = PipelineConfig {
                mechanism: a.mechanism.parse()?,
                features: Some(a.features.clone()),
                labels: Some(a.labels.clone()),
                seed: a.seed,
                train_fraction: a.train_fraction,
                eval_epochs: a.eval_epochs,
                ..PipelineConfig::default()
            };
            cfg.validate()?;
            let prep = capriv_cli::prepare(&cfg)?;
            let m = attack(&cfg, &prep.x, &prep.y, &prep.split)?;
            print_json(&serde_json::to_value(m).map_err(|e| CliError::Numeric(e.to_string()))?)?;
        }
        Command::Audit(a) => {
            let x = io::read_features(&a.features)?;
            let y = io::read_labels(&a.labels)?;
            let cfg = PipelineConfig {
                audit: capriv_cli::AuditConfig {
                    enabled: true,
                    k_nn: a.k_nn,
                    pca_dim: a.pca_dim,
                },
                ..PipelineConfig::default()
            };
            if a.k_nn == 0 || a.pca_dim == 0 {
                return Err(CliError::Config("k_nn and pca_dim must be at least 1".into()));
            }
            if x.nrows() != y.len() {
                return Err(CliError::Config(format!("{} feature rows but {} labels", x.nrows(), y.len())));
            }
            let mi = audit(&cfg, &x, &y)?;
            print_json(&serde_json::json!({ "mi_nats": mi, "k_nn": a.k_nn, "pca_dim": a.pca_dim }))?;
        }
        Command::Sweep(a) => {
            let cfg = a.pipeline.resolve()?;
            let report = run_sweep(&cfg, &a.gammas, &a.ks)?;
            if cfg.output.report.is_none() {
                print!("{}", report.to_json()?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
