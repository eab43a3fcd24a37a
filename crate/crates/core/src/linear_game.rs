//! Linear release mechanism for continuous labels.
//!
//! The holder releases `X̃ = X M Xᵀ X` for a PSD compression matrix `M`. With
//! the thin SVD `X = U S Vᵀ` every useful `M` has the form `V N Vᵀ`, and the
//! convex relaxation
//!
//! ```text
//! min (1/n) Tr(Y_cᵀ X M Xᵀ Y_c) + β Tr(M)   s.t.  ‖X M Xᵀ X − X‖_F² ≤ γ,  M ⪰ 0
//! ```
//!
//! becomes a linear program over `PSD ∩ ellipsoid` in `N`. It is solved in the
//! rescaled variable `Z = S^{3/2} N S^{3/2}`, in which the ellipsoid weights are
//! `√((s_i² + s_j²) / (2 s_i s_j)) ≥ 1` and the zero-distortion point is `diag(s)`.
//! `Y_c` is `Y` with column means removed; the attacker fits an intercept, so
//! only centered labels carry information.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{FeatureMatrix, LabelSet, SplitBatches};
use crate::error::{Error, Result};
use crate::linalg::{self, center_columns, inner, lstsq, select_rows, solve_spd, symmetrize, with_intercept, ThinSvd};
use crate::numopt::{self, EllipsoidSpec, KktResiduals, SolverSettings, SymMatrix};

/// Eigenvalues of a solved compression below this fraction of the largest are
/// numerical residue of the projections and are set to zero.
pub const RESIDUE_CUT: f64 = 1e-9;

pub const BETA_MIN: f64 = 1e-10;
pub const BETA_MAX: f64 = 1e10;

/// Sample second moments `C_xx = XᵀX / n`, `C_xy = XᵀY / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCache {
    pub c_xx: DMatrix<f64>,
    pub c_xy: DMatrix<f64>,
    pub n: usize,
}

pub fn cross_moments(x: &FeatureMatrix, y: &LabelSet) -> Result<MomentCache> {
    let y = y.as_continuous()?;
    let xv = x.values();
    if y.nrows() != xv.nrows() {
        return Err(Error::invalid(format!("{} label rows for {} samples", y.nrows(), xv.nrows())));
    }
    let n = xv.nrows();
    let scale = 1.0 / n as f64;
    Ok(MomentCache {
        c_xx: symmetrize(&(xv.transpose() * xv)) * scale,
        c_xy: xv.transpose() * y * scale,
        n,
    })
}

pub type SvdCache = ThinSvd;

pub fn svd_cache(x: &FeatureMatrix) -> Result<SvdCache> {
    linalg::thin_svd(x.values())
}

/// Least-squares attacker on compressed data `X A`: `Θ = (Aᵀ C_xx A)⁻¹ Aᵀ C_xy`.
pub fn attacker_theta(a: &DMatrix<f64>, mom: &MomentCache) -> Result<DMatrix<f64>> {
    if a.nrows() != mom.c_xx.nrows() {
        return Err(Error::invalid("compression rows must match the feature count"));
    }
    let gram = a.transpose() * &mom.c_xx * a;
    solve_spd(&gram, &(a.transpose() * &mom.c_xy))
}

/// `(1/n) ‖Y − X A Θ‖_F²`.
pub fn attacker_loss(x: &FeatureMatrix, y: &LabelSet, a: &DMatrix<f64>, theta: &DMatrix<f64>) -> Result<f64> {
    let y = y.as_continuous()?;
    let resid = y - x.values() * a * theta;
    Ok(resid.norm_squared() / y.nrows() as f64)
}

/// Decoder minimizing `‖X A B − X‖_F`: `B = (AᵀXᵀXA)⁻¹ AᵀXᵀX`.
pub fn best_reconstruction(a: &DMatrix<f64>, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
    let xv = x.values();
    if a.nrows() != xv.ncols() {
        return Err(Error::invalid("compression rows must match the feature count"));
    }
    let xtx = xv.transpose() * xv;
    let at_xtx = a.transpose() * &xtx;
    solve_spd(&(&at_xtx * a), &at_xtx)
}

/// Smallest distortion reachable by a rank-`k` release: `Σ_{i>k} s_i²`.
pub fn min_feasible_distortion(svd: &SvdCache, k: usize) -> Result<f64> {
    if k == 0 || k > svd.rank() {
        return Err(Error::invalid(format!("rank {k} outside 1..={}", svd.rank())));
    }
    Ok(svd.s.iter().skip(k).fold(0.0, |acc, s| acc + s * s))
}

/// Range of budgets `[lo, hi)` for which the trace-dominated release (β → ∞) has
/// effective rank exactly `k` at threshold `eta`.
///
/// With the label term negligible the optimum is diagonal in the singular basis:
/// direction `i` keeps the fraction `z_i = max(0, 1 − a_i/μ)`, `a_i = 1/(2 s_i⁴)`, of its
/// energy, and the budget spent is `γ(μ) = Σ s_i² min(1, a_i/μ)²`. Rank `k` holds for
/// `μ ∈ (μ_k, μ_{k+1}]` with `μ_i = (a_i − η a_1)/(1 − η)`.
pub fn rank_gamma_interval(svd: &SvdCache, k: usize, eta: f64) -> Result<(f64, f64)> {
    let r = svd.rank();
    if k == 0 || k > r {
        return Err(Error::invalid(format!("rank {k} outside 1..={r}")));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid("eta must lie in (0, 1)"));
    }
    let a: Vec<f64> = svd.s.iter().map(|s| 0.5 / s.powi(4)).collect();
    let mu_at = |i: usize| (a[i] - eta * a[0]) / (1.0 - eta);
    let budget = |mu: f64| -> f64 {
        svd.s
            .iter()
            .zip(&a)
            .map(|(s, ai)| {
                let kill = (ai / mu).min(1.0);
                s * s * kill * kill
            })
            .sum()
    };
    let mu_lo = if k == 1 { a[0] } else { mu_at(k - 1) };
    let hi = budget(mu_lo);
    let lo = if k == r { 0.0 } else { budget(mu_at(k)) };
    Ok((lo, hi))
}

/// A budget for which the trace-dominated release has rank exactly `k`.
///
/// Directions past `k` are cut exactly (not merely below the `eta` threshold) when
/// `μ ≤ a_{k+1}`, so `μ` is the geometric midpoint of `(μ_k, min(μ_{k+1}, a_{k+1}))`
/// when that range is nonempty and of `(μ_k, μ_{k+1})` otherwise; `10 μ_r` for full rank.
pub fn gamma_for_rank(svd: &SvdCache, k: usize, eta: f64) -> Result<f64> {
    rank_gamma_interval(svd, k, eta)?;
    let a: Vec<f64> = svd.s.iter().map(|s| 0.5 / s.powi(4)).collect();
    let r = svd.rank();
    let mu_at = |i: usize| (a[i] - eta * a[0]) / (1.0 - eta);
    let mu_lo = if k == 1 { a[0] } else { mu_at(k - 1) };
    let mu = if k == r {
        10.0 * mu_lo
    } else if a[k] > mu_lo {
        (mu_lo * a[k]).sqrt()
    } else {
        (mu_lo * mu_at(k)).sqrt()
    };
    Ok(svd
        .s
        .iter()
        .zip(&a)
        .map(|(s, ai)| {
            let kill = (ai / mu).min(1.0);
            s * s * kill * kill
        })
        .sum())
}

/// Number of eigenvalues strictly above `eta · λ_max` (0 for the zero matrix).
pub fn effective_rank(m: &DMatrix<f64>, eta: f64) -> usize {
    let values = match linalg::sym_eigenvalues(m) {
        Ok(v) => v,
        Err(_) => return 0,
    };
    let top = values.max();
    if !(top > 0.0) {
        return 0;
    }
    values.iter().filter(|v| **v > eta * top).count()
}

/// `X M Xᵀ X`.
pub fn release(x: &FeatureMatrix, m: &DMatrix<f64>) -> Result<FeatureMatrix> {
    let xv = x.values();
    x.replace_values(xv * m * (xv.transpose() * xv))
}

/// `‖X M Xᵀ X − X‖_F²`.
pub fn release_distortion(x: &FeatureMatrix, m: &DMatrix<f64>) -> f64 {
    let xv = x.values();
    (xv * m * (xv.transpose() * xv) - xv).norm_squared()
}

/// `(1/n) Tr(Y_cᵀ X M Xᵀ Y_c) + β Tr(M)`.
pub fn release_objective(x: &FeatureMatrix, y: &LabelSet, m: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let yc = center_columns(y.as_continuous()?);
    let xty = x.values().transpose() * yc;
    Ok(inner(&xty, &(m * &xty)) / x.nrows() as f64 + beta * m.trace())
}

/// A solved compression matrix.
#[derive(Debug, Clone)]
pub struct ReleaseMap {
    /// `p × p` PSD compression.
    pub m: SymMatrix,
    /// Effective rank of the release operator `S N S` (the nonzero spectrum of `X M Xᵀ`).
    pub effective_rank: usize,
    /// Exact rank after residue clipping; the rank of the released data.
    pub numerical_rank: usize,
    pub beta_final: f64,
    pub distortion: f64,
    pub gamma: f64,
    pub objective: f64,
    /// Optimality certificate of the reduced problem.
    pub kkt: KktResiduals,
    pub iterations: usize,
    /// Reduced variable `N = VᵀMV`.
    pub reduced: SymMatrix,
    /// True when the rank loop failed and the rank-`k` SVD truncation was released instead.
    pub fallback: bool,
}

/// Which reduced-problem solver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseSolver {
    /// Bisection on the ellipsoid multiplier ([`numopt::multiplier_linear_min`]).
    Multiplier,
    /// Projected gradient with Dykstra projections ([`numopt::projected_linear_min`]).
    ProjectedGradient,
}

/// Knobs for [`solve_release_map_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseOptions {
    pub settings: SolverSettings,
    pub eta: f64,
    pub solver: ReleaseSolver,
    /// Projected-gradient step as a multiple of `√γ / ‖G‖_F` in the rescaled variable.
    pub step_scale: f64,
}

impl Default for ReleaseOptions {
    fn default() -> Self {
        ReleaseOptions {
            settings: SolverSettings {
                projection_tol: 1e-10,
                tol: 1e-10,
                dykstra_max_iter: 2000,
                ..SolverSettings::default()
            },
            eta: 0.01,
            solver: ReleaseSolver::Multiplier,
            step_scale: 1.0,
        }
    }
}

/// Reduced data for one release problem.
struct Reduced {
    svd: ThinSvd,
    /// `Uᵀ Y_c`, r × d.
    b: DMatrix<f64>,
    n: usize,
}

impl Reduced {
    fn new(x: &FeatureMatrix, y: &LabelSet) -> Result<Self> {
        let yv = y.as_continuous()?;
        if yv.nrows() != x.nrows() {
            return Err(Error::invalid(format!("{} label rows for {} samples", yv.nrows(), x.nrows())));
        }
        let svd = linalg::thin_svd(x.values())?;
        let b = svd.u.transpose() * center_columns(yv);
        Ok(Reduced { svd, b, n: x.nrows() })
    }

    fn s_pow(&self, a: f64) -> DVector<f64> {
        self.svd.s.map(|s| s.powf(a))
    }

    /// Objective matrix in `Z`: `S^{-3/2} ((1/n) S b bᵀ S + β I) S^{-3/2}`.
    fn objective_z(&self, beta: f64) -> DMatrix<f64> {
        let r = self.svd.rank();
        let sh = self.s_pow(-0.5);
        let bbt = &self.b * self.b.transpose();
        let s = &self.svd.s;
        symmetrize(&DMatrix::from_fn(r, r, |i, j| {
            let lin = sh[i] * bbt[(i, j)] * sh[j] / self.n as f64;
            if i == j {
                lin + beta / (s[i] * s[i] * s[i])
            } else {
                lin
            }
        }))
    }

    fn ellipsoid_z(&self, gamma: f64) -> Result<EllipsoidSpec> {
        let s = &self.svd.s;
        let r = s.len();
        let weights = DMatrix::from_fn(r, r, |i, j| ((s[i] * s[i] + s[j] * s[j]) / (2.0 * s[i] * s[j])).sqrt());
        let center = DMatrix::from_diagonal(s);
        EllipsoidSpec::new(weights, center, gamma)
    }

    fn n_to_z(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.s_pow(1.5);
        DMatrix::from_fn(n.nrows(), n.ncols(), |i, j| d[i] * n[(i, j)] * d[j])
    }

    fn z_to_n(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.s_pow(-1.5);
        symmetrize(&DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| d[i] * z[(i, j)] * d[j]))
    }

    /// `S N S = S^{-1/2} Z S^{-1/2}`.
    fn operator_from_z(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.s_pow(-0.5);
        symmetrize(&DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| d[i] * z[(i, j)] * d[j]))
    }
}

/// Zero eigenvalues at or below `cut · λ_max`; also returns the surviving count.
fn clip_residue(z: &DMatrix<f64>, cut: f64) -> Result<(DMatrix<f64>, usize)> {
    let (mut values, vectors) = linalg::sym_eigen(z)?;
    let top = values.max().max(0.0);
    values.apply(|v| {
        if *v <= cut * top {
            *v = 0.0
        }
    });
    let rank = values.iter().filter(|v| **v > 0.0).count();
    Ok((linalg::from_eigen(&values, &vectors), rank))
}

pub fn solve_release_map(x: &FeatureMatrix, y: &LabelSet, gamma: f64, beta: f64) -> Result<ReleaseMap> {
    solve_release_map_with(x, y, gamma, beta, &ReleaseOptions::default(), None)
}

/// [`solve_release_map`] with explicit options and an optional warm start `N₀ = VᵀM₀V`.
pub fn solve_release_map_with(
    x: &FeatureMatrix,
    y: &LabelSet,
    gamma: f64,
    beta: f64,
    opts: &ReleaseOptions,
    warm: Option<&SymMatrix>,
) -> Result<ReleaseMap> {
    if !(gamma >= 0.0) || gamma.is_infinite() {
        return Err(Error::invalid("gamma must be finite and nonnegative"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta must be finite and nonnegative"));
    }
    let red = Reduced::new(x, y)?;
    solve_reduced(&red, gamma, beta, opts, warm)
}

fn solve_reduced(
    red: &Reduced,
    gamma: f64,
    beta: f64,
    opts: &ReleaseOptions,
    warm: Option<&SymMatrix>,
) -> Result<ReleaseMap> {
    let r = red.svd.rank();
    let g = SymMatrix::symmetrized(&red.objective_z(beta))?;
    let spec = red.ellipsoid_z(gamma)?;
    let (point, iterations) = match opts.solver {
        ReleaseSolver::Multiplier => {
            let sol = numopt::multiplier_linear_min(&g, &spec, &opts.settings)?;
            (sol.point, sol.iterations)
        }
        ReleaseSolver::ProjectedGradient => {
            let start = match warm {
                Some(n0) if n0.dim() == r => SymMatrix::symmetrized(&red.n_to_z(n0.as_matrix()))?,
                _ => SymMatrix::symmetrized(spec.center())?,
            };
            let gnorm = g.as_matrix().norm();
            let mut settings = opts.settings.clone();
            if settings.step_size.is_none() && gnorm > 0.0 {
                let reach = gamma.sqrt().max(1e-3 * spec.center().norm());
                settings.step_size = Some(opts.step_scale * reach / gnorm);
            }
            let sol = numopt::projected_linear_min(&g, &spec, &settings, &start)?;
            (sol.point, sol.iterations)
        }
    };
    let (z, numerical_rank) = clip_residue(point.as_matrix(), RESIDUE_CUT)?;
    let zs = SymMatrix::symmetrized(&z)?;
    let kkt = numopt::kkt_residuals(&g, &spec, &zs)?;
    let n = red.z_to_n(&z);
    let m = symmetrize(&(&red.svd.v * &n * red.svd.v.transpose()));
    let op = red.operator_from_z(&z);
    let distortion = spec.constraint_value(&z);
    Ok(ReleaseMap {
        m: SymMatrix::symmetrized(&m)?,
        effective_rank: effective_rank(&op, opts.eta),
        numerical_rank,
        beta_final: beta,
        distortion,
        gamma,
        objective: inner(g.as_matrix(), &z),
        kkt,
        iterations,
        reduced: SymMatrix::symmetrized(&n)?,
        fallback: false,
    })
}

/// Inputs of the rank-targeting loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGameConfig {
    pub gamma: f64,
    pub k: usize,
    pub eta: f64,
    pub beta0: f64,
    pub max_outer: usize,
    /// Release the rank-`k` SVD truncation (always feasible once the budget gate
    /// passes) when the loop ends without reaching rank `k`, instead of failing.
    pub truncation_fallback: bool,
}

impl LinearGameConfig {
    pub fn new(gamma: f64, k: usize) -> Self {
        LinearGameConfig {
            gamma,
            k,
            eta: 0.01,
            beta0: 1.0,
            max_outer: 60,
            truncation_fallback: true,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || self.gamma.is_infinite() {
            return Err(Error::invalid("gamma must be finite and nonnegative"));
        }
        if self.k == 0 || self.k > p {
            return Err(Error::invalid(format!("target rank {} outside 1..={p}", self.k)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid("eta must lie in (0, 1)"));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::invalid("beta0 must be positive"));
        }
        if self.max_outer == 0 {
            return Err(Error::invalid("max_outer must be positive"));
        }
        Ok(())
    }
}

/// Penalty update: raise β by half when the rank is too high, lower it by a quarter when too low.
///
/// The loop passes the larger of the effective and exact rank, so a solution whose
/// spectrum has nonzero entries under the threshold still counts as too high.
pub fn next_beta(beta: f64, rank: usize, k: usize) -> f64 {
    match rank.cmp(&k) {
        std::cmp::Ordering::Greater => beta + beta / 2.0,
        std::cmp::Ordering::Less => beta - beta / 4.0,
        std::cmp::Ordering::Equal => beta,
    }
}

/// Adjust β until the release has effective rank `k` with nothing left below the
/// threshold, then release `X M Xᵀ X`.
pub fn run_linear_game(x: &FeatureMatrix, y: &LabelSet, cfg: &LinearGameConfig) -> Result<(FeatureMatrix, ReleaseMap)> {
    run_linear_game_with(x, y, cfg, &ReleaseOptions::default())
}

pub fn run_linear_game_with(
    x: &FeatureMatrix,
    y: &LabelSet,
    cfg: &LinearGameConfig,
    opts: &ReleaseOptions,
) -> Result<(FeatureMatrix, ReleaseMap)> {
    let (n, p) = (x.nrows(), x.ncols());
    cfg.validate(p)?;
    if n <= p {
        return Err(Error::invalid(format!("batch has {n} rows, needs more than {p}")));
    }
    let red = Reduced::new(x, y)?;
    if cfg.k > red.svd.rank() {
        return Err(Error::invalid(format!(
            "target rank {} exceeds the data rank {}",
            cfg.k,
            red.svd.rank()
        )));
    }
    let min_gamma = min_feasible_distortion(&red.svd, cfg.k)?;
    if cfg.gamma < min_gamma {
        return Err(Error::InfeasibleDistortion {
            gamma: cfg.gamma,
            min_gamma,
            k: cfg.k,
        });
    }
    let opts = ReleaseOptions {
        eta: cfg.eta,
        ..opts.clone()
    };
    let mut beta = cfg.beta0;
    let mut warm: Option<SymMatrix> = None;
    let mut closest: Option<(usize, f64)> = None;
    let mut last: Option<ReleaseMap> = None;
    for _ in 0..cfg.max_outer {
        let map = solve_reduced(&red, cfg.gamma, beta, &opts, warm.as_ref())?;
        let rank = map.effective_rank.max(map.numerical_rank);
        if rank == cfg.k {
            let released = release(x, map.m.as_matrix())?;
            return Ok((released, map));
        }
        let better = match closest {
            None => true,
            Some((r, _)) => rank.abs_diff(cfg.k) < r.abs_diff(cfg.k),
        };
        if better {
            closest = Some((rank, beta));
        }
        beta = next_beta(beta, rank, cfg.k);
        warm = Some(map.reduced.clone());
        last = Some(map);
        if !(BETA_MIN..=BETA_MAX).contains(&beta) {
            break;
        }
    }
    if cfg.truncation_fallback {
        let map = truncation_map(&red, cfg, last.map(|m| m.beta_final).unwrap_or(cfg.beta0))?;
        let released = release(x, map.m.as_matrix())?;
        return Ok((released, map));
    }
    let (rank, beta) = closest.unwrap_or((0, beta));
    Err(Error::RankNotAttained {
        target: cfg.k,
        closest: rank,
        beta,
    })
}

/// `M = V_k S_k⁻² V_kᵀ`, reported against the objective at `beta`.
fn truncation_map(red: &Reduced, cfg: &LinearGameConfig, beta: f64) -> Result<ReleaseMap> {
    let r = red.svd.rank();
    let s = &red.svd.s;
    let n = DMatrix::from_fn(r, r, |i, j| if i == j && i < cfg.k { 1.0 / (s[i] * s[i]) } else { 0.0 });
    let z = red.n_to_z(&n);
    let g = SymMatrix::symmetrized(&red.objective_z(beta))?;
    let spec = red.ellipsoid_z(cfg.gamma)?;
    let zs = SymMatrix::symmetrized(&z)?;
    let kkt = numopt::kkt_residuals(&g, &spec, &zs)?;
    let m = symmetrize(&(&red.svd.v * &n * red.svd.v.transpose()));
    Ok(ReleaseMap {
        m: SymMatrix::symmetrized(&m)?,
        effective_rank: effective_rank(&red.operator_from_z(&z), cfg.eta),
        numerical_rank: cfg.k,
        beta_final: beta,
        distortion: spec.constraint_value(&z),
        gamma: cfg.gamma,
        objective: inner(g.as_matrix(), &z),
        kkt,
        iterations: 0,
        reduced: SymMatrix::symmetrized(&n)?,
        fallback: true,
    })
}

/// Covariance of additive noise on the compressed features.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma: SymMatrix,
}

impl NoiseSpec {
    pub fn new(sigma: SymMatrix) -> Result<Self> {
        if sigma.min_eigenvalue()? < -1e-12 * sigma.as_matrix().norm().max(1.0) {
            return Err(Error::invalid("noise covariance must be PSD"));
        }
        Ok(NoiseSpec { sigma })
    }
}

/// Expected losses when each compressed sample `x_iᵀA` is perturbed by `ε ~ N(0, Σ)`.
///
/// With the noisy release `X A + E` the least-squares attacker is
/// `Θ = (Aᵀ C_xx A + Σ)⁻¹ Aᵀ C_xy` and the decoder is `B = (AᵀXᵀXA + nΣ)⁻¹ AᵀXᵀX`.
/// Returns `E (1/n)‖Y − (XA + E)Θ‖_F²` and `E ‖(XA + E)B − X‖_F²` at those minimizers.
pub fn noisy_linear_objective(
    a: &DMatrix<f64>,
    noise: &NoiseSpec,
    x: &FeatureMatrix,
    y: &LabelSet,
) -> Result<(f64, f64)> {
    let mom = cross_moments(x, y)?;
    let k = a.ncols();
    if a.nrows() != x.ncols() || noise.sigma.dim() != k {
        return Err(Error::invalid("compression and noise dimensions do not agree"));
    }
    let yv = y.as_continuous()?;
    let n = x.nrows() as f64;
    let sigma = noise.sigma.as_matrix();
    let atc = a.transpose() * &mom.c_xy;
    let gram = a.transpose() * &mom.c_xx * a + sigma;
    let theta = solve_spd(&gram, &atc)?;
    let attacker = yv.norm_squared() / n - inner(&atc, &theta);
    let xv = x.values();
    let xtx = xv.transpose() * xv;
    let atx = a.transpose() * &xtx;
    let b = solve_spd(&(&atx * a + sigma * n), &atx)?;
    let reconstruction = xtx.trace() - inner(&atx, &b);
    Ok((attacker, reconstruction))
}

/// Held-out performance of a least-squares attacker on released data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearAttackMetrics {
    pub rmse: f64,
    pub r2: f64,
    /// `‖X̃ − X‖_F² / ‖X‖_F²` over all rows.
    pub distortion: f64,
}

/// Fit OLS with intercept on the training rows of `x_tilde`, score on the test rows.
pub fn linear_attack_eval(
    x_tilde: &FeatureMatrix,
    x: &FeatureMatrix,
    y: &LabelSet,
    split: &SplitBatches,
) -> Result<LinearAttackMetrics> {
    let yv = y.as_continuous()?;
    if x_tilde.values().shape() != x.values().shape() || yv.nrows() != x.nrows() {
        return Err(Error::invalid("released data, original data and labels disagree in shape"));
    }
    if split.n() != x.nrows() {
        return Err(Error::invalid("split does not cover the data"));
    }
    let design = with_intercept(x_tilde.values());
    let coef = lstsq(&select_rows(&design, &split.train_indices), &select_rows(yv, &split.train_indices))?;
    let y_test = select_rows(yv, &split.test_indices);
    let pred = select_rows(&design, &split.test_indices) * coef;
    let ss_res = (&y_test - pred).norm_squared();
    let ss_tot = center_columns(&y_test).norm_squared();
    let rmse = (ss_res / y_test.len() as f64).sqrt();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    let xn = x.values().norm_squared();
    let distortion = if xn > 0.0 {
        (x_tilde.values() - x.values()).norm_squared() / xn
    } else {
        0.0
    };
    Ok(LinearAttackMetrics { rmse, r2, distortion })
}
