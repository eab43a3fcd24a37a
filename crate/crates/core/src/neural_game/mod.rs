//! Nonlinear mechanism: an encoder–decoder holder against a classifier attacker.
//!
//! The holder `g(x, y)` releases `x̃` and is trained to minimize
//!
//! ```text
//! L = −CE(h(x̃), y) + β (D − γ)² + ρ max(0, D − γ),   D = (1/n) Σ ‖x̃_i − x_i‖²
//! ```
//!
//! while the attacker `h` minimizes the cross-entropy on the released rows.

pub mod mlp;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::seq::index;

use crate::dataset::{FeatureMatrix, LabelSet, SplitBatches};
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

pub use mlp::{cross_entropy, Activation, MlpGrads, MlpParams, MlpSpec, Mode, Upstream};

/// Class index of a ±1 label: `−1 → 0`, `+1 → 1`.
pub fn class_indices(y: &DVector<f64>) -> Vec<usize> {
    y.iter().map(|&v| usize::from(v > 0.0)).collect()
}

/// Rows of `x` with the ±1 label appended as the last coordinate.
pub fn with_label_column(x: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j < p { x[(i, j)] } else { y[i] })
}

/// Armijo backtracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoSettings {
    pub c: f64,
    pub shrink: f64,
    pub alpha0: f64,
    pub max_halvings: usize,
}

impl Default for ArmijoSettings {
    fn default() -> Self {
        ArmijoSettings {
            c: 1e-4,
            shrink: 0.5,
            alpha0: 0.1,
            max_halvings: 30,
        }
    }
}

/// Anything a gradient step can be taken on.
pub trait Descent: Sized + Clone {
    type Grad;
    fn descend(&self, g: &Self::Grad, alpha: f64) -> Self;
    fn grad_norm_squared(g: &Self::Grad) -> f64;
}

impl Descent for MlpParams {
    type Grad = MlpGrads;
    fn descend(&self, g: &MlpGrads, alpha: f64) -> Self {
        self.step(g, alpha)
    }
    fn grad_norm_squared(g: &MlpGrads) -> f64 {
        g.norm_squared()
    }
}

impl Descent for DVector<f64> {
    type Grad = DVector<f64>;
    fn descend(&self, g: &DVector<f64>, alpha: f64) -> Self {
        self - g * alpha
    }
    fn grad_norm_squared(g: &DVector<f64>) -> f64 {
        g.norm_squared()
    }
}

/// One Armijo-backtracked descent step.
///
/// Returns `(params, 0.0)` unchanged when no tried step satisfies
/// `L(θ − αd) ≤ L(θ) − c α ‖d‖²`, and `(params, alpha0)` at a zero gradient.
pub fn backtracking_update<P: Descent>(
    params: &P,
    grads: &P::Grad,
    mut evaluator: impl FnMut(&P) -> Result<f64>,
    armijo: &ArmijoSettings,
) -> Result<(P, f64)> {
    let gsq = P::grad_norm_squared(grads);
    if !gsq.is_finite() {
        return Err(Error::NonFinite("line-search direction"));
    }
    if gsq == 0.0 {
        return Ok((params.clone(), armijo.alpha0));
    }
    let base = evaluator(params)?;
    let mut alpha = armijo.alpha0;
    for _ in 0..=armijo.max_halvings {
        let cand = params.descend(grads, alpha);
        let val = evaluator(&cand)?;
        if val.is_finite() && val <= base - armijo.c * alpha * gsq {
            return Ok((cand, alpha));
        }
        alpha *= armijo.shrink;
    }
    Ok((params.clone(), 0.0))
}

/// Full-batch gradient descent on the cross-entropy, halving the step whenever the loss would rise.
///
/// Returns the trained parameters and the loss before each epoch plus the final loss.
pub fn train_attacker_traced(
    h: &MlpParams,
    x_tilde: &DMatrix<f64>,
    y: &DVector<f64>,
    epochs: usize,
    lr: f64,
) -> Result<(MlpParams, Vec<f64>)> {
    if x_tilde.nrows() != y.len() {
        return Err(Error::invalid("released rows and labels differ in count"));
    }
    if epochs == 0 {
        return Ok((h.clone(), Vec::new()));
    }
    let classes = class_indices(y);
    let mut params = h.clone();
    let mut pass = params.forward(x_tilde, Mode::Train)?;
    let mut loss = cross_entropy(pass.output(), &classes);
    let mut losses = vec![loss];
    let mut step = lr;
    for _ in 0..epochs {
        let (grads, _) = params.backward(&pass, Upstream::CrossEntropy(&classes))?;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = params.step(&grads, step);
            let cand_pass = cand.forward(x_tilde, Mode::Train)?;
            let cand_loss = cross_entropy(cand_pass.output(), &classes);
            if cand_loss <= loss {
                params = cand;
                params.update_running_stats(&cand_pass);
                pass = cand_pass;
                loss = cand_loss;
                step *= 1.25;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    params.calibrate_running_stats(x_tilde)?;
    Ok((params, losses))
}

pub const DEFAULT_ATTACKER_LR: f64 = 0.5;

pub fn train_attacker(h: &MlpParams, x_tilde: &DMatrix<f64>, y: &DVector<f64>, epochs: usize) -> Result<MlpParams> {
    train_attacker_traced(h, x_tilde, y, epochs, DEFAULT_ATTACKER_LR).map(|r| r.0)
}

/// Accuracy of `h` in inference mode.
pub fn attacker_accuracy(h: &MlpParams, x_tilde: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let probs = h.predict(x_tilde, Mode::Inference)?;
    let correct = (0..y.len())
        .filter(|&i| {
            let pred = if probs[(i, 1)] >= probs[(i, 0)] { 1.0 } else { -1.0 };
            pred == y[i]
        })
        .count();
    Ok(correct as f64 / y.len() as f64)
}

/// One minibatch of the holder objective.
#[derive(Debug, Clone)]
pub struct HolderBatch {
    /// `x` with the label column appended.
    pub input: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub classes: Vec<usize>,
}

impl HolderBatch {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid("rows and labels differ in count"));
        }
        Ok(HolderBatch {
            input: with_label_column(x, y),
            target: x.clone(),
            classes: class_indices(y),
        })
    }

    pub fn rows(&self, idx: &[usize]) -> HolderBatch {
        HolderBatch {
            input: linalg::select_rows(&self.input, idx),
            target: linalg::select_rows(&self.target, idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HolderEval {
    pub loss: f64,
    pub attacker_loss: f64,
    pub distortion: f64,
    pub grads: MlpGrads,
}

/// `(1/n) Σ ‖x_i − x̄‖²`, the scale of [`mean_sq_distortion`] for a constant release.
pub fn total_variance(x: &DMatrix<f64>) -> f64 {
    linalg::center_columns(x).norm_squared() / x.nrows().max(1) as f64
}

/// Mean squared per-sample Euclidean distance.
pub fn mean_sq_distortion(x_tilde: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (x_tilde - x).norm_squared() / x.nrows() as f64
}

/// Root mean squared change per entry.
pub fn rms_per_coordinate(x_tilde: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (mean_sq_distortion(x_tilde, x) / x.ncols() as f64).sqrt()
}

fn holder_value(
    g: &MlpParams,
    h: &MlpParams,
    batch: &HolderBatch,
    beta: f64,
    rho: f64,
    gamma: f64,
) -> Result<(f64, f64, f64, mlp::ForwardPass, mlp::ForwardPass)> {
    let gp = g.forward(&batch.input, Mode::Train)?;
    let hp = h.forward(gp.output(), Mode::Inference)?;
    let ce = cross_entropy(hp.output(), &batch.classes);
    let d = mean_sq_distortion(gp.output(), &batch.target);
    let excess = d - gamma;
    let loss = -ce + beta * excess * excess + rho * excess.max(0.0);
    Ok((loss, ce, d, gp, hp))
}

/// Value and exact gradient of the holder loss over the parameters of `g`, with `h` held fixed
/// (inference-mode batch norm).
pub fn holder_objective_and_grad(
    g: &MlpParams,
    h: &MlpParams,
    batch: &HolderBatch,
    beta: f64,
    rho: f64,
    gamma: f64,
) -> Result<HolderEval> {
    let (loss, ce, d, gp, hp) = holder_value(g, h, batch, beta, rho, gamma)?;
    let (_, dce_dx) = h.backward(&hp, Upstream::CrossEntropy(&batch.classes))?;
    let n = batch.target.nrows() as f64;
    let excess = d - gamma;
    let coef = 2.0 * beta * excess + if excess > 0.0 { rho } else { 0.0 };
    let upstream = -dce_dx + (gp.output() - &batch.target) * (2.0 * coef / n);
    let (grads, _) = g.backward(&gp, Upstream::Grad(&upstream))?;
    Ok(HolderEval {
        loss,
        attacker_loss: ce,
        distortion: d,
        grads,
    })
}

/// Holder loss only, for line searches.
pub fn holder_loss(g: &MlpParams, h: &MlpParams, batch: &HolderBatch, beta: f64, rho: f64, gamma: f64) -> Result<f64> {
    holder_value(g, h, batch, beta, rho, gamma).map(|v| v.0)
}

/// Nondecreasing penalty weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `base · (1 + t / 10)`.
    Linear { base: f64 },
    /// Explicit values; the last one repeats.
    Explicit(Vec<f64>),
}

impl Schedule {
    pub fn value(&self, t: usize) -> f64 {
        match self {
            Schedule::Linear { base } => base * (1.0 + t as f64 / 10.0),
            Schedule::Explicit(v) => v[t.min(v.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Linear { base } if !(*base >= 0.0 && base.is_finite()) => {
                Err(Error::invalid("schedule base must be finite and nonnegative"))
            }
            Schedule::Explicit(v) if v.is_empty() => Err(Error::invalid("explicit schedule is empty")),
            Schedule::Explicit(v) if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) => {
                Err(Error::invalid("schedule values must be finite and nonnegative"))
            }
            Schedule::Explicit(v) if v.windows(2).any(|w| w[1] < w[0]) => {
                Err(Error::invalid("schedule must be nondecreasing"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnGameConfig {
    /// Budget on the mean squared per-sample distortion.
    pub gamma: f64,
    pub beta: Schedule,
    pub rho: Schedule,
    /// Outer rounds.
    pub t: usize,
    pub minibatch: usize,
    pub armijo: ArmijoSettings,
    pub attacker_epochs: usize,
    pub attacker_lr: f64,
    pub seed: u64,
}

impl NnGameConfig {
    pub fn new(gamma: f64, seed: u64) -> Self {
        NnGameConfig {
            gamma,
            beta: Schedule::Linear { base: 1.0 },
            rho: Schedule::Linear { base: 1.0 },
            t: 100,
            minibatch: 256,
            armijo: ArmijoSettings::default(),
            attacker_epochs: 50,
            attacker_lr: DEFAULT_ATTACKER_LR,
            seed,
        }
    }

    /// Defaults with the penalty bases expressed in units of the total input variance `v`:
    /// `β_0 = 1 / v²`, `ρ_0 = 1 / v`.
    pub fn for_data(gamma: f64, x: &DMatrix<f64>, seed: u64) -> Self {
        let v = total_variance(x).max(f64::MIN_POSITIVE);
        let mut cfg = Self::new(gamma, seed);
        cfg.beta = Schedule::Linear { base: 1.0 / (v * v) };
        cfg.rho = Schedule::Linear { base: 1.0 / v };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be finite and nonnegative"));
        }
        self.beta.validate()?;
        self.rho.validate()?;
        if self.t == 0 || self.minibatch < 2 {
            return Err(Error::invalid("need T >= 1 and minibatch >= 2"));
        }
        let a = &self.armijo;
        if !(a.c > 0.0 && a.c < 1.0 && a.shrink > 0.0 && a.shrink < 1.0 && a.alpha0 > 0.0) {
            return Err(Error::invalid("Armijo settings need c, shrink in (0, 1) and alpha0 > 0"));
        }
        if !(self.attacker_lr > 0.0) {
            return Err(Error::invalid("attacker learning rate must be positive"));
        }
        Ok(())
    }
}

/// Holder initialization reproducing the rank-`⌊hidden/2⌋` PCA reconstruction of `x`.
///
/// Each principal direction `v` feeds a pair of ReLU units `±vᵀ(x − x̄)` whose batch norm
/// is set to pass the training statistics through unchanged; the read-out recombines
/// the pair. The label coordinate starts with zero weight.
pub fn pca_holder_init(spec: &MlpSpec, x: &DMatrix<f64>) -> Result<MlpParams> {
    spec.validate()?;
    let p = x.ncols();
    if spec.n_layers() != 2 || spec.layer_dims[0] != p + 1 || spec.layer_dims[2] != p {
        return Err(Error::invalid("PCA initialization needs a (p + 1) → hidden → p holder"));
    }
    if spec.activations[0] != Activation::Relu || spec.activations[1] != Activation::Linear {
        return Err(Error::invalid("PCA initialization needs a ReLU hidden layer and linear output"));
    }
    let hidden = spec.layer_dims[1];
    let mean = linalg::column_means(x);
    let centered = linalg::center_columns(x);
    let cov = centered.transpose() * &centered / x.nrows() as f64;
    let (vals, vecs) = linalg::sym_eigen(&cov)?;
    let dirs = (hidden / 2).min(p);
    let mut w1 = DMatrix::zeros(p + 1, hidden);
    let mut b1 = RowDVector::zeros(hidden);
    let mut w2 = DMatrix::zeros(hidden, p);
    let mut scale = RowDVector::from_element(hidden, 1.0);
    let mut shift = RowDVector::zeros(hidden);
    let mut rmean = RowDVector::zeros(hidden);
    let mut rvar = RowDVector::from_element(hidden, 1.0);
    for k in 0..dirs {
        let sd = (vals[k].max(0.0) + mlp::BN_EPS).sqrt();
        for (unit, sign) in [(2 * k, 1.0), (2 * k + 1, -1.0)] {
            let mut offset = 0.0;
            for j in 0..p {
                w1[(j, unit)] = sign * vecs[(j, k)];
                offset += vecs[(j, k)] * mean[j];
                w2[(unit, j)] = sign * vecs[(j, k)];
            }
            b1[unit] = -sign * offset;
            // Batch norm sees a zero-mean unit of variance vals[k]; undo it.
            scale[unit] = sd;
            shift[unit] = 0.0;
            rmean[unit] = 0.0;
            rvar[unit] = vals[k].max(0.0);
        }
    }
    let mut rng = seed::rng(0, "holder-init", 0);
    let mut params = MlpParams::init(spec, &mut rng)?;
    params.layers[0].w = w1;
    params.layers[0].b = b1;
    if let Some(bn) = &mut params.layers[0].bn {
        bn.scale = scale;
        bn.shift = shift;
        bn.running_mean = rmean;
        bn.running_var = rvar;
    }
    params.layers[1].w = w2;
    params.layers[1].b = mean.transpose();
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnRound {
    pub t: usize,
    pub beta: f64,
    pub rho: f64,
    pub holder_loss: f64,
    pub attacker_loss: f64,
    pub distortion: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct NnGameResult {
    pub g_params: MlpParams,
    pub h_params: MlpParams,
    pub released: FeatureMatrix,
    /// Mean squared per-sample distortion of the full release.
    pub distortion: f64,
    /// `sqrt(distortion / p)`.
    pub rms_per_coordinate: f64,
    pub converged: bool,
    pub trace: Vec<NnRound>,
}

const CONVERGE_REL: f64 = 1e-5;
const CONVERGE_WINDOW: usize = 5;

/// Release `x̃ = g(x, y)` on all rows, with batch-norm statistics taken from those rows.
pub fn release_with(g: &mut MlpParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let input = with_label_column(x, y);
    g.calibrate_running_stats(&input)?;
    g.predict(&input, Mode::Inference)
}

pub fn run_nn_game(
    x: &FeatureMatrix,
    y: &LabelSet,
    g_spec: &MlpSpec,
    h_spec: &MlpSpec,
    cfg: &NnGameConfig,
) -> Result<NnGameResult> {
    cfg.validate()?;
    let yv = y.as_binary()?;
    let xv = x.values();
    let (n, p) = xv.shape();
    if yv.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", yv.len())));
    }
    if g_spec.layer_dims.first() != Some(&(p + 1)) || g_spec.layer_dims.last() != Some(&p) {
        return Err(Error::invalid("holder network must map p + 1 inputs to p outputs"));
    }
    if h_spec.layer_dims.first() != Some(&p) || h_spec.layer_dims.last() != Some(&2) {
        return Err(Error::invalid("attacker network must map p inputs to 2 classes"));
    }
    let all = HolderBatch::new(xv, yv)?;
    let mut g = pca_holder_init(g_spec, xv)?;
    let mut h = MlpParams::init(h_spec, &mut seed::rng(cfg.seed, "nn-attacker-init", 0))?;
    let m = cfg.minibatch.min(n);
    let mut trace = Vec::with_capacity(cfg.t);
    let mut calm = 0usize;
    let mut converged = false;
    let mut prev_loss: Option<f64> = None;
    for t in 0..cfg.t {
        let beta = cfg.beta.value(t);
        let rho = cfg.rho.value(t);
        let mut rng = seed::rng(cfg.seed, "nn-minibatch", t as u64);
        let mut idx = index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        let batch = all.rows(&idx);
        let released = g.predict(&batch.input, Mode::Train)?;
        let yb = DVector::from_iterator(m, idx.iter().map(|&i| yv[i]));
        (h, _) = train_attacker_traced(&h, &released, &yb, cfg.attacker_epochs, cfg.attacker_lr)?;
        let eval = holder_objective_and_grad(&g, &h, &batch, beta, rho, cfg.gamma)?;
        let (g_new, alpha) = backtracking_update(
            &g,
            &eval.grads,
            |cand| holder_loss(cand, &h, &batch, beta, rho, cfg.gamma),
            &cfg.armijo,
        )?;
        g = g_new;
        let pass = g.forward(&batch.input, Mode::Train)?;
        g.update_running_stats(&pass);
        trace.push(NnRound {
            t,
            beta,
            rho,
            holder_loss: eval.loss,
            attacker_loss: eval.attacker_loss,
            distortion: eval.distortion,
            alpha,
        });
        if let Some(prev) = prev_loss {
            let rel = (eval.loss - prev).abs() / prev.abs().max(1e-12);
            calm = if rel < CONVERGE_REL { calm + 1 } else { 0 };
            if calm >= CONVERGE_WINDOW {
                converged = true;
                break;
            }
        }
        prev_loss = Some(eval.loss);
    }
    if !g.all_finite() {
        return Err(Error::NonFinite("holder parameters"));
    }
    let released = release_with(&mut g, xv, yv)?;
    let distortion = mean_sq_distortion(&released, xv);
    let rms_per_coordinate = rms_per_coordinate(&released, xv);
    Ok(NnGameResult {
        released: x.replace_values(released)?,
        g_params: g,
        h_params: h,
        distortion,
        rms_per_coordinate,
        converged,
        trace,
    })
}

/// Held-out accuracy of a freshly trained attacker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnAttackMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn nn_attack_eval(
    x_tilde: &FeatureMatrix,
    y: &LabelSet,
    split: &SplitBatches,
    h_spec: &MlpSpec,
    epochs: usize,
    seed_value: u64,
) -> Result<NnAttackMetrics> {
    let yv = y.as_binary()?;
    if yv.len() != x_tilde.nrows() || split.n() != yv.len() {
        return Err(Error::invalid("released data, labels and split disagree in size"));
    }
    let pick = |idx: &[usize]| {
        (
            linalg::select_rows(x_tilde.values(), idx),
            DVector::from_iterator(idx.len(), idx.iter().map(|&i| yv[i])),
        )
    };
    let (xtr, ytr) = pick(&split.train_indices);
    let (xte, yte) = pick(&split.test_indices);
    let h0 = MlpParams::init(h_spec, &mut seed::rng(seed_value, "nn-eval-attacker", 0))?;
    let h = train_attacker(&h0, &xtr, &ytr, epochs)?;
    Ok(NnAttackMetrics {
        train_accuracy: attacker_accuracy(&h, &xtr, &ytr)?,
        test_accuracy: attacker_accuracy(&h, &xte, &yte)?,
    })
}
