//! Linear release mechanism for binary labels.
//!
//! The holder releases `X̃ = X M` with `M ⪰ 0` and `‖XM − X‖_F² ≤ γ`. The attacker
//! is a ridge-regularized logistic regression with intercept on the released
//! rows. Each round the attacker is refit by Newton's method and the holder takes
//! one projected ascent step on
//!
//! ```text
//! F(M) = L(θ; M) − β Tr(M) − w ‖∇_θ L(θ; M)‖²,   L = (1/N) Σ log(1 + exp(−y_i (θᵀ M x_i + b)))
//! ```
//!
//! The projection works in `Ñ = VᵀMV` (full right singular basis of `X`), where
//! the constraint reads `Σ s_i² (Ñ − I)_ij² ≤ γ`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{FeatureMatrix, LabelSet, SplitBatches};
use crate::error::{Error, Result};
use crate::linalg::{self, inner, select_rows, symmetrize};
use crate::linear_game::{effective_rank, next_beta};
use crate::numopt::{self, EllipsoidSpec, SolverSettings, SymMatrix};

pub const DEFAULT_RIDGE: f64 = 1e-6;
const NEWTON_MAX_STEPS: usize = 200;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic attacker `P(y = +1 | x̃) = σ(θᵀx̃ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticAttacker {
    pub theta: DVector<f64>,
    pub bias: f64,
    pub ridge: f64,
}

impl LogisticAttacker {
    pub fn zeros(p: usize) -> Self {
        LogisticAttacker {
            theta: DVector::zeros(p),
            bias: 0.0,
            ridge: DEFAULT_RIDGE,
        }
    }

    /// `(θ, b)` stacked.
    pub fn weights(&self) -> DVector<f64> {
        let p = self.theta.len();
        DVector::from_fn(p + 1, |i, _| if i < p { self.theta[i] } else { self.bias })
    }

    fn from_weights(w: &DVector<f64>, ridge: f64) -> Self {
        let p = w.len() - 1;
        LogisticAttacker {
            theta: w.rows(0, p).into_owned(),
            bias: w[p],
            ridge,
        }
    }

    /// Predicted labels on already-released rows.
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let z = x * &self.theta;
        z.map(|v| if v + self.bias >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn accuracy(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y.iter()).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }
}

/// Value, gradient and Hessian in `(θ, b)` of
/// `(1/N) Σ log(1 + exp(−y_i (θᵀ M x_i + b))) + ridge ‖(θ, b)‖² / 2`.
#[derive(Debug, Clone)]
pub struct LossGradHess {
    pub loss: f64,
    /// Length `p + 1`, intercept last.
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

fn check_dims(m: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if m.nrows() != x.ncols() || !m.is_square() {
        return Err(Error::invalid("compression must be p × p"));
    }
    if y.len() != x.nrows() {
        return Err(Error::invalid(format!("{} labels for {} samples", y.len(), x.nrows())));
    }
    Ok(())
}

/// Released rows with a trailing column of ones.
fn augmented(x: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let xm = x * m;
    let (n, p) = xm.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j < p { xm[(i, j)] } else { 1.0 })
}

fn loss_grad_hess_aug(w: &DVector<f64>, ridge: f64, xa: &DMatrix<f64>, y: &DVector<f64>, with_hess: bool) -> LossGradHess {
    let n = xa.nrows() as f64;
    let z = xa * w;
    let mut loss = 0.0;
    let mut coef = DVector::zeros(xa.nrows());
    let mut curv = DVector::zeros(xa.nrows());
    for i in 0..xa.nrows() {
        let margin = y[i] * z[i];
        loss += softplus(-margin);
        let s = sigmoid(-margin);
        coef[i] = -s * y[i];
        curv[i] = s * (1.0 - s);
    }
    let grad = xa.transpose() * coef / n + w * ridge;
    let hess = if with_hess {
        let mut weighted = xa.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= curv[i];
        }
        symmetrize(&(xa.transpose() * weighted / n)) + DMatrix::identity(w.len(), w.len()) * ridge
    } else {
        DMatrix::zeros(0, 0)
    };
    LossGradHess {
        loss: loss / n + 0.5 * ridge * w.norm_squared(),
        grad,
        hess,
    }
}

pub fn logistic_loss_grad_hess(
    att: &LogisticAttacker,
    m: &DMatrix<f64>,
    x: &FeatureMatrix,
    y: &LabelSet,
) -> Result<LossGradHess> {
    let yv = y.as_binary()?;
    check_dims(m, x.values(), yv)?;
    if att.theta.len() != m.nrows() {
        return Err(Error::invalid("attacker and compression dimensions differ"));
    }
    let xa = augmented(x.values(), m);
    Ok(loss_grad_hess_aug(&att.weights(), att.ridge, &xa, yv, true))
}

/// Newton's method with step halving from `θ = 0` until `‖∇‖ ≤ tol`.
pub fn fit_logistic(m: &DMatrix<f64>, x: &FeatureMatrix, y: &LabelSet, tol: f64) -> Result<LogisticAttacker> {
    fit_logistic_traced(m, x, y, tol).map(|(a, _)| a)
}

/// Per-step record of [`fit_logistic_traced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStep {
    pub loss: f64,
    pub grad_norm: f64,
    pub hess_min_eigenvalue: f64,
}

pub fn fit_logistic_traced(
    m: &DMatrix<f64>,
    x: &FeatureMatrix,
    y: &LabelSet,
    tol: f64,
) -> Result<(LogisticAttacker, Vec<NewtonStep>)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol must be positive"));
    }
    let yv = y.as_binary()?;
    check_dims(m, x.values(), yv)?;
    let xa = augmented(x.values(), m);
    let ridge = DEFAULT_RIDGE;
    let mut w = DVector::zeros(xa.ncols());
    let mut trace = Vec::new();
    for _ in 0..NEWTON_MAX_STEPS {
        let cur = loss_grad_hess_aug(&w, ridge, &xa, yv, true);
        let grad_norm = cur.grad.norm();
        let hess_min = linalg::sym_eigenvalues(&cur.hess)?.min();
        trace.push(NewtonStep {
            loss: cur.loss,
            grad_norm,
            hess_min_eigenvalue: hess_min,
        });
        if grad_norm <= tol {
            return Ok((LogisticAttacker::from_weights(&w, ridge), trace));
        }
        let step = cur
            .hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&cur.grad))
            .unwrap_or_else(|| cur.grad.clone());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &w - &step * t;
            let next = loss_grad_hess_aug(&cand, ridge, &xa, yv, false);
            if next.loss <= cur.loss + 4.0 * f64::EPSILON * cur.loss.abs() {
                w = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                what: "logistic Newton line search",
                iterations: trace.len(),
                residual: grad_norm,
            });
        }
    }
    let last = trace.last().map(|s| s.grad_norm).unwrap_or(f64::NAN);
    Err(Error::NonConvergence {
        what: "logistic Newton",
        iterations: NEWTON_MAX_STEPS,
        residual: last,
    })
}

/// Inputs of the categorical game.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalGameConfig {
    pub gamma: f64,
    pub k: usize,
    /// Number of rounds.
    pub t: usize,
    pub beta0: f64,
    /// Upper clamp of the rank-targeting β updates.
    pub beta_max: f64,
    pub eta: f64,
    pub stationarity_weight: f64,
    /// Early stop once `‖M_t − M_{t−1}‖_F ≤ tol` at the target rank.
    pub tol: f64,
    /// Gradient-norm tolerance of the attacker fit.
    pub fit_tol: f64,
    /// Trial step length (Frobenius) of the ascent; `None` scales with `√(γ p / ‖X‖_F²)`.
    pub step_length: Option<f64>,
    pub max_halvings: usize,
    /// Also line-search along `M − t MθθᵀM / θᵀMθ`.
    pub deflation: bool,
    /// Fail with `RankNotAttained` when the last iterate misses rank `k`.
    pub strict_rank: bool,
    pub projection: SolverSettings,
}

impl CategoricalGameConfig {
    pub fn new(gamma: f64, k: usize) -> Self {
        CategoricalGameConfig {
            gamma,
            k,
            t: 30,
            beta0: 1e-3,
            beta_max: crate::linear_game::BETA_MAX,
            eta: 0.01,
            stationarity_weight: 1.0,
            tol: 1e-6,
            fit_tol: 1e-8,
            step_length: None,
            max_halvings: 30,
            deflation: true,
            strict_rank: false,
            projection: SolverSettings::default(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || self.gamma.is_infinite() {
            return Err(Error::invalid("gamma must be finite and nonnegative"));
        }
        if self.k == 0 || self.k > p {
            return Err(Error::invalid(format!("target rank {} outside 1..={p}", self.k)));
        }
        if self.t == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::invalid("beta0 must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid("eta must lie in (0, 1)"));
        }
        if !(self.stationarity_weight >= 0.0) || !(self.tol > 0.0) || !(self.fit_tol > 0.0) {
            return Err(Error::invalid("weights and tolerances must be nonnegative / positive"));
        }
        if let Some(s) = self.step_length {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("step_length must be finite and nonnegative"));
            }
        }
        self.projection.validate()
    }
}

/// Distortion geometry of one batch.
#[derive(Debug, Clone)]
pub struct HolderGeometry {
    v: DMatrix<f64>,
    spec: EllipsoidSpec,
    data_energy: f64,
}

impl HolderGeometry {
    pub fn new(x: &FeatureMatrix, gamma: f64) -> Result<Self> {
        Self::from_matrix(x.values(), gamma)
    }

    fn from_matrix(x: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let p = x.ncols();
        let svd = linalg::thin_svd(x)?;
        if svd.rank() < p {
            return Err(Error::invalid(format!(
                "categorical mechanism needs full column rank, got rank {} for {p} features",
                svd.rank()
            )));
        }
        let s = &svd.s;
        let weights = DMatrix::from_fn(p, p, |i, j| ((s[i] * s[i] + s[j] * s[j]) / 2.0).sqrt());
        let spec = EllipsoidSpec::new(weights, DMatrix::identity(p, p), gamma)?;
        Ok(HolderGeometry {
            v: svd.v,
            spec,
            data_energy: x.norm_squared(),
        })
    }

    fn to_reduced(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(self.v.transpose() * m * &self.v))
    }

    fn from_reduced(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.v * n * self.v.transpose()))
    }

    /// `‖XM − X‖_F²`.
    pub fn distortion(&self, m: &DMatrix<f64>) -> f64 {
        self.spec.constraint_value(&self.to_reduced(m))
    }

    /// Largest `t ∈ [0, 1]` with `‖X(M − tD) − X‖_F² ≤ γ`, for feasible `M`.
    pub fn max_feasible_step(&self, m: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
        // g(t) = a t² − 2 b t + c with a, c ≥ 0.
        let w2 = self.spec.weights().map(|w| w * w);
        let r = self.to_reduced(m) - self.spec.center();
        let e = self.to_reduced(d);
        let a = w2.component_mul(&e).dot(&e);
        let b = w2.component_mul(&e).dot(&r);
        let c = w2.component_mul(&r).dot(&r);
        let gamma = self.spec.radius_sq();
        if a <= 0.0 || a - 2.0 * b + c <= gamma {
            return 1.0;
        }
        let disc = b * b - a * (c - gamma);
        if disc < 0.0 {
            return 0.0;
        }
        (((b + disc.sqrt()) / a) * (1.0 - 1e-12)).clamp(0.0, 1.0)
    }

    pub fn project(&self, m: &DMatrix<f64>, settings: &SolverSettings) -> Result<SymMatrix> {
        let n = SymMatrix::symmetrized(&self.to_reduced(m))?;
        let proj = numopt::multiplier_project(&n, &self.spec, settings)?;
        SymMatrix::symmetrized(&self.from_reduced(proj.as_matrix()))
    }
}

/// Penalized holder objective and its gradient in `M` (symmetrized).
#[derive(Debug, Clone)]
pub struct HolderValue {
    pub objective: f64,
    pub attacker_loss: f64,
    pub stationarity: f64,
    pub grad: DMatrix<f64>,
}

pub fn holder_objective(
    att: &LogisticAttacker,
    m: &DMatrix<f64>,
    x: &FeatureMatrix,
    y: &LabelSet,
    beta: f64,
    stationarity_weight: f64,
) -> Result<HolderValue> {
    let yv = y.as_binary()?;
    let xv = x.values();
    check_dims(m, xv, yv)?;
    let p = xv.ncols();
    let n = xv.nrows() as f64;
    let xa = augmented(xv, m);
    let w = att.weights();
    let lg = loss_grad_hess_aug(&w, att.ridge, &xa, yv, false);
    let phi = &lg.grad;
    let z = &xa * &w;
    // c_i = −σ(−m_i) y_i, s_i = σ(m_i) σ(−m_i).
    let mut c = DVector::zeros(xv.nrows());
    let mut s = DVector::zeros(xv.nrows());
    for i in 0..xv.nrows() {
        let sg = sigmoid(-yv[i] * z[i]);
        c[i] = -sg * yv[i];
        s[i] = sg * (1.0 - sg);
    }
    let theta = &att.theta;
    // dL/dM = (1/N) Σ c_i θ x_iᵀ.
    let xtc = xv.transpose() * &c / n;
    let grad_loss = theta * xtc.transpose();
    // d‖φ‖²/dM = (2/N) Σ [c_i φ_θ x_iᵀ + s_i (φᵀ x̃_i) θ x_iᵀ].
    let phi_theta = phi.rows(0, p).into_owned();
    let proj = (&xa * phi).component_mul(&s);
    let grad_pen = (&phi_theta * xtc.transpose() + theta * (xv.transpose() * proj / n).transpose()) * 2.0;
    let grad = symmetrize(&(grad_loss - grad_pen * stationarity_weight)) - DMatrix::identity(p, p) * beta;
    let loss = lg.loss;
    let stationarity = phi.norm_squared();
    Ok(HolderValue {
        objective: loss - beta * m.trace() - stationarity_weight * stationarity,
        attacker_loss: loss,
        stationarity,
        grad,
    })
}

/// One projected ascent step with backtracking; never lowers the objective by more than `1e-9`.
pub fn holder_ascent_step(
    att: &LogisticAttacker,
    m: &SymMatrix,
    x: &FeatureMatrix,
    y: &LabelSet,
    beta: f64,
    cfg: &CategoricalGameConfig,
) -> Result<SymMatrix> {
    let geom = HolderGeometry::new(x, cfg.gamma)?;
    ascent_with(&geom, att, m, x, y, beta, cfg)
}

const NULL_CUT: f64 = 1e-9;

/// The face of the PSD cone holding `M`: `M = R K Rᵀ` with `R` an orthonormal range basis.
///
/// On the face `‖XM − X‖_F² = ‖XR(K − I)‖_F² + ‖XN‖_F²` with `N` spanning the null space,
/// so the face is again a weighted ellipsoid in `K`.
struct Face {
    range: DMatrix<f64>,
    geom: Option<HolderGeometry>,
}

impl Face {
    fn of(m: &SymMatrix, x: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let p = m.dim();
        let (vals, vecs) = linalg::sym_eigen(m.as_matrix())?;
        let cut = NULL_CUT * vals.max().max(1.0);
        let keep: Vec<usize> = (0..p).filter(|&i| vals[i] > cut).collect();
        if keep.len() == p {
            return Ok(Face {
                range: DMatrix::identity(p, p),
                geom: None,
            });
        }
        let range = DMatrix::from_fn(p, keep.len(), |i, j| vecs[(i, keep[j])]);
        let null: Vec<usize> = (0..p).filter(|i| !keep.contains(i)).collect();
        let null_basis = DMatrix::from_fn(p, null.len(), |i, j| vecs[(i, null[j])]);
        let spent = (x * &null_basis).norm_squared();
        let geom = if keep.is_empty() {
            None
        } else {
            Some(HolderGeometry::from_matrix(&(x * &range), (gamma - spent).max(0.0))?)
        };
        Ok(Face { range, geom })
    }

    fn project(&self, full: &HolderGeometry, trial: &DMatrix<f64>, settings: &SolverSettings) -> Result<SymMatrix> {
        match &self.geom {
            None if self.range.ncols() == trial.nrows() => full.project(trial, settings),
            None => Ok(SymMatrix::zeros(trial.nrows())),
            Some(g) => {
                let k = symmetrize(&(self.range.transpose() * trial * &self.range));
                let kp = g.project(&k, settings)?;
                SymMatrix::symmetrized(&(&self.range * kp.as_matrix() * self.range.transpose()))
            }
        }
    }
}

fn default_step(geom: &HolderGeometry, p: usize, gamma: f64) -> f64 {
    let per_dim = geom.data_energy / p as f64;
    if per_dim > 0.0 {
        0.5 * (gamma / per_dim).sqrt().max(1e-3)
    } else {
        0.5
    }
}

fn ascent_with(
    geom: &HolderGeometry,
    att: &LogisticAttacker,
    m: &SymMatrix,
    x: &FeatureMatrix,
    y: &LabelSet,
    beta: f64,
    cfg: &CategoricalGameConfig,
) -> Result<SymMatrix> {
    let base = geom.project(m.as_matrix(), &cfg.projection)?;
    let cur = holder_objective(att, base.as_matrix(), x, y, beta, cfg.stationarity_weight)?;
    let length = cfg.step_length.unwrap_or_else(|| default_step(geom, x.ncols(), cfg.gamma));
    if length == 0.0 {
        return Ok(base);
    }
    // Directions already removed stay removed.
    let face = Face::of(&base, x.values(), cfg.gamma)?;
    let eval = |trial: &DMatrix<f64>| -> Result<(SymMatrix, f64)> {
        let cand = face.project(geom, trial, &cfg.projection)?;
        let val = holder_objective(att, cand.as_matrix(), x, y, beta, cfg.stationarity_weight)?;
        Ok((cand, val.objective))
    };
    let (mut best, mut best_f) = (base.clone(), cur.objective);

    let gnorm = cur.grad.norm();
    if gnorm > 0.0 {
        let mut alpha = length / gnorm;
        for _ in 0..=cfg.max_halvings {
            let (cand, f) = eval(&(base.as_matrix() + &cur.grad * alpha))?;
            if f >= cur.objective - 1e-9 {
                if f > best_f {
                    best = cand;
                    best_f = f;
                }
                break;
            }
            alpha *= 0.5;
        }
    }

    // The loss is stationary in M at the attacker's optimum, so the gradient alone
    // only rescales. Also search the path that removes the attacker's direction.
    if cfg.deflation {
        let u = base.as_matrix() * &att.theta;
        let curv = att.theta.dot(&u);
        if curv > 1e-12 * att.theta.norm_squared().max(f64::MIN_POSITIVE) {
            let d = &u * u.transpose() / curv;
            // Stay inside the budget without projecting, so earlier null directions survive.
            let t_max = geom.max_feasible_step(base.as_matrix(), &d);
            let mut t = t_max;
            for _ in 0..=cfg.max_halvings {
                if t <= 0.0 {
                    break;
                }
                let cand = SymMatrix::symmetrized(&(base.as_matrix() - &d * t))?;
                let f = holder_objective(att, cand.as_matrix(), x, y, beta, cfg.stationarity_weight)?.objective;
                if f > best_f {
                    best = cand;
                    break;
                }
                t *= 0.5;
            }
        }
    }
    Ok(best)
}

/// One round of the game.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub beta: f64,
    pub attacker_loss: f64,
    pub objective: f64,
    pub effective_rank: usize,
    pub change: f64,
    pub distortion: f64,
    pub hessian_min_eigenvalue: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct CategoricalGameResult {
    /// Average of the round iterates `M_1..M_T`.
    pub m_bar: SymMatrix,
    pub released: FeatureMatrix,
    pub effective_rank: usize,
    pub rank_attained: bool,
    pub distortion: f64,
    pub beta_final: f64,
    pub rounds: Vec<RoundRecord>,
}

impl CategoricalGameResult {
    /// Smallest Hessian eigenvalue seen across every Newton step of every fit.
    pub fn min_hessian_eigenvalue(&self) -> f64 {
        self.rounds.iter().map(|r| r.hessian_min_eigenvalue).fold(f64::INFINITY, f64::min)
    }
}

pub fn run_categorical_game(x: &FeatureMatrix, y: &LabelSet, cfg: &CategoricalGameConfig) -> Result<CategoricalGameResult> {
    let (n, p) = (x.nrows(), x.ncols());
    cfg.validate(p)?;
    y.as_binary()?;
    if y.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} samples", y.len())));
    }
    if n <= p {
        return Err(Error::invalid(format!("batch has {n} rows, needs more than {p}")));
    }
    let geom = HolderGeometry::new(x, cfg.gamma)?;
    let mut m = SymMatrix::identity(p);
    let mut sum = DMatrix::zeros(p, p);
    let mut beta = cfg.beta0;
    let mut rounds = Vec::new();
    let mut last_rank = p;
    for _ in 0..cfg.t {
        let (att, steps) = fit_logistic_traced(m.as_matrix(), x, y, cfg.fit_tol)?;
        let next = ascent_with(&geom, &att, &m, x, y, beta, cfg)?;
        let value = holder_objective(&att, next.as_matrix(), x, y, beta, cfg.stationarity_weight)?;
        let change = (next.as_matrix() - m.as_matrix()).norm();
        let rank = effective_rank(next.as_matrix(), cfg.eta);
        rounds.push(RoundRecord {
            beta,
            attacker_loss: value.attacker_loss,
            objective: value.objective,
            effective_rank: rank,
            change,
            distortion: geom.distortion(next.as_matrix()),
            hessian_min_eigenvalue: steps.iter().map(|s| s.hess_min_eigenvalue).fold(f64::INFINITY, f64::min),
            newton_steps: steps.len(),
        });
        sum += next.as_matrix();
        m = next;
        last_rank = rank;
        if change <= cfg.tol && rank == cfg.k {
            break;
        }
        beta = next_beta(beta, rank, cfg.k).clamp(crate::linear_game::BETA_MIN, cfg.beta_max);
    }
    let m_bar = SymMatrix::symmetrized(&(sum / rounds.len() as f64))?;
    let rank_bar = effective_rank(m_bar.as_matrix(), cfg.eta);
    if cfg.strict_rank && last_rank != cfg.k {
        return Err(Error::RankNotAttained {
            target: cfg.k,
            closest: last_rank,
            beta,
        });
    }
    let released = x.replace_values(x.values() * m_bar.as_matrix())?;
    Ok(CategoricalGameResult {
        distortion: geom.distortion(m_bar.as_matrix()),
        effective_rank: rank_bar,
        rank_attained: last_rank == cfg.k,
        beta_final: beta,
        m_bar,
        released,
        rounds,
    })
}

/// Train/test accuracy of a logistic attacker fit on the training rows of released data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticAttackMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn logistic_attack_eval(x_tilde: &FeatureMatrix, y: &LabelSet, split: &SplitBatches) -> Result<LogisticAttackMetrics> {
    let yv = y.as_binary()?;
    if yv.len() != x_tilde.nrows() || split.n() != yv.len() {
        return Err(Error::invalid("released data, labels and split disagree in size"));
    }
    let xtr = x_tilde.select_rows(&split.train_indices)?;
    let ytr = y.select_rows(&split.train_indices);
    let att = fit_logistic(&DMatrix::identity(x_tilde.ncols(), x_tilde.ncols()), &xtr, &ytr, 1e-8)?;
    let yte = DVector::from_iterator(split.test_indices.len(), split.test_indices.iter().map(|&i| yv[i]));
    Ok(LogisticAttackMetrics {
        train_accuracy: att.accuracy(xtr.values(), ytr.as_binary()?),
        test_accuracy: att.accuracy(&select_rows(x_tilde.values(), &split.test_indices), &yte),
    })
}

/// `Tr(Aᵀ B)` on two compressions, exposed for diagnostics.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    inner(a, b)
}
