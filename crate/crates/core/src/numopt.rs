//! Convex machinery for the linear release mechanisms.
//!
//! Everything here works on small dense symmetric matrices: the PSD cone, a
//! weighted Frobenius ellipsoid `{N : Σ w_ij² (N_ij − C_ij)² ≤ r²}`, their
//! intersection (Dykstra's alternating projections), and projected gradient
//! descent for a linear objective `Tr(Q N)` over that intersection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, all_finite, frob_sq, inner, symmetrize};

const SYMMETRY_TOL: f64 = 1e-10;

/// A finite, symmetric square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        let scale = values.norm().max(1.0);
        if (&values - values.transpose()).norm() > SYMMETRY_TOL * scale {
            return Err(Error::invalid("matrix is not symmetric"));
        }
        Ok(SymMatrix(symmetrize(&values)))
    }

    /// Symmetrizes the input rather than rejecting asymmetry.
    pub fn symmetrized(values: &DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::invalid("symmetric matrix must be square"));
        }
        if !all_finite(values) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        Ok(SymMatrix(symmetrize(values)))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues, descending.
    pub fn eigenvalues(&self) -> Result<DVector<f64>> {
        linalg::sym_eigenvalues(&self.0)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.min())
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Weighted Frobenius ellipsoid `Σ w_ij² (N_ij − C_ij)² ≤ radius_sq`.
///
/// `radius_sq = +∞` switches the constraint off.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidSpec {
    weights: DMatrix<f64>,
    center: DMatrix<f64>,
    radius_sq: f64,
}

impl EllipsoidSpec {
    pub fn new(weights: DMatrix<f64>, center: DMatrix<f64>, radius_sq: f64) -> Result<Self> {
        if weights.shape() != center.shape() || !weights.is_square() {
            return Err(Error::invalid("ellipsoid weights and center must be square and equal-sized"));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::invalid("ellipsoid weights must be finite and positive"));
        }
        if !all_finite(&center) {
            return Err(Error::NonFinite("ellipsoid center"));
        }
        if radius_sq.is_nan() || radius_sq < 0.0 {
            return Err(Error::invalid("ellipsoid radius_sq must be nonnegative"));
        }
        let wscale = weights.norm();
        let cscale = center.norm().max(1.0);
        if (&weights - weights.transpose()).norm() > SYMMETRY_TOL * wscale
            || (&center - center.transpose()).norm() > SYMMETRY_TOL * cscale
        {
            return Err(Error::invalid("ellipsoid weights and center must be symmetric"));
        }
        Ok(EllipsoidSpec {
            weights: symmetrize(&weights),
            center: symmetrize(&center),
            radius_sq,
        })
    }

    /// Uniform-weight Frobenius ball of squared radius `radius_sq` around `center`.
    pub fn ball(center: DMatrix<f64>, radius_sq: f64) -> Result<Self> {
        let (r, c) = center.shape();
        Self::new(DMatrix::from_element(r, c, 1.0), center, radius_sq)
    }

    /// The distortion set `‖S N S² − S‖_F² ≤ γ` in the reduced coordinates
    /// `N = VᵀMV` of `X = U S Vᵀ`, restricted to symmetric `N`.
    ///
    /// For symmetric `N` the (i,j) and (j,i) terms share a deviation, so the
    /// raw per-entry weights `s_i s_j²` are replaced by their root mean square
    /// `s_i s_j √((s_i² + s_j²)/2)`; the constraint value is unchanged.
    pub fn distortion(singular_values: &DVector<f64>, gamma: f64) -> Result<Self> {
        let s = singular_values;
        let r = s.len();
        let weights = DMatrix::from_fn(r, r, |i, j| s[i] * s[j] * ((s[i] * s[i] + s[j] * s[j]) / 2.0).sqrt());
        let center = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 / (s[i] * s[i]) } else { 0.0 });
        Self::new(weights, center, gamma)
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    pub fn radius_sq(&self) -> f64 {
        self.radius_sq
    }

    pub fn is_active(&self) -> bool {
        self.radius_sq.is_finite()
    }

    /// `Σ w_ij² (N_ij − C_ij)²`.
    pub fn constraint_value(&self, n: &DMatrix<f64>) -> f64 {
        self.weights
            .iter()
            .zip(n.iter().zip(self.center.iter()))
            .map(|(w, (v, c))| {
                let d = w * (v - c);
                d * d
            })
            .sum()
    }

    /// Gradient of the constraint value, `2 w² ∘ (N − C)`.
    pub fn constraint_gradient(&self, n: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            let w = self.weights[(i, j)];
            2.0 * w * w * (n[(i, j)] - self.center[(i, j)])
        })
    }

    /// Amount by which `n` exceeds the budget (0 when feasible).
    pub fn violation(&self, n: &DMatrix<f64>) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        (self.constraint_value(n) - self.radius_sq).max(0.0)
    }
}

/// Iteration controls for the projection and descent loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Gradient step; `None` uses `1 / (‖Q‖_F + 1)`.
    pub step_size: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub projection_tol: f64,
    pub dykstra_max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            step_size: None,
            max_iter: 5000,
            tol: 1e-8,
            projection_tol: 1e-8,
            dykstra_max_iter: 500,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if let Some(step) = self.step_size {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::invalid("step_size must be positive"));
            }
        }
        if !(self.tol > 0.0) || !(self.projection_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_iter == 0 || self.dykstra_max_iter == 0 {
            return Err(Error::invalid("iteration caps must be positive"));
        }
        Ok(())
    }

    fn step_for(&self, q: &DMatrix<f64>) -> f64 {
        self.step_size.unwrap_or_else(|| 1.0 / (q.norm() + 1.0))
    }
}

/// Moore–Penrose pseudo-inverse.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !all_finite(a) {
        return Err(Error::NonFinite("pseudo-inverse input"));
    }
    let (p, k) = a.shape();
    if a.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(k, p));
    }
    let svd = linalg::thin_svd(a)?;
    let cut = p.max(k) as f64 * f64::EPSILON * svd.s[0];
    let mut vs = svd.v.clone();
    for (j, mut col) in vs.column_iter_mut().enumerate() {
        let sj = svd.s[j];
        if sj > cut {
            col /= sj;
        } else {
            col.fill(0.0);
        }
    }
    Ok(vs * svd.u.transpose())
}

/// Nearest PSD matrix in Frobenius norm: clip negative eigenvalues to zero.
pub fn psd_project(s: &SymMatrix) -> Result<SymMatrix> {
    let (mut values, vectors) = linalg::sym_eigen(s.as_matrix())?;
    if values.iter().all(|v| *v >= 0.0) {
        return Ok(s.clone());
    }
    values.apply(|v| *v = v.max(0.0));
    Ok(SymMatrix(linalg::from_eigen(&values, &vectors)))
}

/// Nearest point of the weighted ellipsoid.
///
/// The minimizer has the entrywise form `N_ij = (P_ij + λ w_ij² C_ij) / (1 + λ w_ij²)`;
/// the multiplier `λ ≥ 0` is the root of a convex decreasing function and is
/// found by Newton steps safeguarded by a doubling/bisection bracket.
pub fn ellipsoid_project(p: &SymMatrix, spec: &EllipsoidSpec) -> Result<SymMatrix> {
    Ok(SymMatrix(ellipsoid_project_raw(p.as_matrix(), spec)?.0))
}

/// Returns the projection and the multiplier used.
pub fn ellipsoid_project_raw(p: &DMatrix<f64>, spec: &EllipsoidSpec) -> Result<(DMatrix<f64>, f64)> {
    if p.shape() != spec.weights.shape() {
        return Err(Error::invalid("ellipsoid and matrix dimensions differ"));
    }
    if !spec.is_active() {
        return Ok((p.clone(), 0.0));
    }
    let radius = spec.radius_sq;
    let dev: Vec<f64> = p.iter().zip(spec.center.iter()).map(|(a, c)| a - c).collect();
    let w2: Vec<f64> = spec.weights.iter().map(|w| w * w).collect();

    let value = |lambda: f64| -> f64 {
        dev.iter()
            .zip(&w2)
            .map(|(d, w)| {
                let t = d / (1.0 + lambda * w);
                w * t * t
            })
            .sum()
    };
    let slope = |lambda: f64| -> f64 {
        dev.iter()
            .zip(&w2)
            .map(|(d, w)| {
                let den = 1.0 + lambda * w;
                -2.0 * w * w * d * d / (den * den * den)
            })
            .sum()
    };

    if value(0.0) <= radius {
        return Ok((p.clone(), 0.0));
    }
    if radius == 0.0 {
        return Ok((spec.center.clone(), f64::INFINITY));
    }

    let mut hi = 1.0 / w2.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut doublings = 0;
    while value(hi) > radius {
        hi *= 2.0;
        doublings += 1;
        if doublings > 2000 || !hi.is_finite() {
            return Err(Error::BracketFailure);
        }
    }
    let mut lo = 0.0;
    let mut lambda = 0.0;
    for _ in 0..200 {
        let f = value(lambda) - radius;
        if f.abs() <= 1e-15 * radius {
            break;
        }
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let d = slope(lambda);
        let newton = lambda - f / d;
        lambda = if d < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-16 * hi {
            lambda = hi;
            break;
        }
    }
    // Newton approaches from the infeasible side; step just past the root.
    let mut bump = 4.0 * f64::EPSILON * lambda.max(f64::MIN_POSITIVE);
    while value(lambda) > radius && lambda < hi {
        lambda = (lambda + bump).min(hi);
        bump *= 2.0;
    }
    let out = DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| {
        let w = spec.weights[(i, j)];
        let w2 = w * w;
        (p[(i, j)] + lambda * w2 * spec.center[(i, j)]) / (1.0 + lambda * w2)
    });
    Ok((out, lambda))
}

/// Correction terms carried between Dykstra runs.
///
/// Dykstra's iterates keep `x + p + q` equal to the point being projected, so
/// a later run may start from `x₀ = target − p − q` with the old corrections
/// and still converge to the projection of the new target.
#[derive(Debug, Clone)]
pub struct DykstraState {
    psd_correction: DMatrix<f64>,
    ellipsoid_correction: DMatrix<f64>,
    pub iterations: usize,
}

impl DykstraState {
    pub fn new(dim: usize) -> Self {
        DykstraState {
            psd_correction: DMatrix::zeros(dim, dim),
            ellipsoid_correction: DMatrix::zeros(dim, dim),
            iterations: 0,
        }
    }
}

/// Projection onto `PSD ∩ ellipsoid`.
pub fn dykstra_intersect(p: &SymMatrix, spec: &EllipsoidSpec, settings: &SolverSettings) -> Result<SymMatrix> {
    let mut state = DykstraState::new(p.dim());
    dykstra_intersect_warm(p, spec, settings, &mut state)
}

/// [`dykstra_intersect`] reusing correction terms from an earlier run.
pub fn dykstra_intersect_warm(
    target: &SymMatrix,
    spec: &EllipsoidSpec,
    settings: &SolverSettings,
    state: &mut DykstraState,
) -> Result<SymMatrix> {
    settings.validate()?;
    if target.dim() != spec.dim() {
        return Err(Error::invalid("ellipsoid and matrix dimensions differ"));
    }
    if !spec.is_active() {
        state.iterations = 1;
        return psd_project(target);
    }
    let t = target.as_matrix();
    let mut x = t - &state.psd_correction - &state.ellipsoid_correction;
    let mut psd_violation = f64::INFINITY;
    let mut change = f64::INFINITY;
    for it in 0..settings.dykstra_max_iter {
        let shifted = &x + &state.psd_correction;
        let y = psd_project(&SymMatrix(symmetrize(&shifted)))?.0;
        state.psd_correction = shifted - &y;
        let shifted = &y + &state.ellipsoid_correction;
        let (x_new, _) = ellipsoid_project_raw(&shifted, spec)?;
        state.ellipsoid_correction = shifted - &x_new;
        change = (&x_new - &x).norm();
        x = x_new;
        let scale = x.norm().max(1.0);
        if change <= settings.tol * scale {
            psd_violation = (-linalg::sym_eigenvalues(&x)?.min()).max(0.0);
            if psd_violation <= settings.projection_tol * scale {
                state.iterations = it + 1;
                return Ok(SymMatrix(symmetrize(&x)));
            }
        }
    }
    state.iterations = settings.dykstra_max_iter;
    if psd_violation.is_infinite() {
        psd_violation = (-linalg::sym_eigenvalues(&x)?.min()).max(0.0);
    }
    let scale = x.norm().max(1.0);
    let ell_violation = spec.violation(&x);
    if psd_violation <= settings.projection_tol * scale
        && ell_violation <= settings.projection_tol * spec.radius_sq.max(1.0)
    {
        return Ok(SymMatrix(symmetrize(&x)));
    }
    Err(Error::NonConvergence {
        what: "Dykstra projection",
        iterations: settings.dykstra_max_iter,
        residual: psd_violation.max(ell_violation).max(change),
    })
}

/// Result of [`projected_linear_min`].
#[derive(Debug, Clone)]
pub struct LinearMinSolution {
    pub point: SymMatrix,
    pub objective: f64,
    pub iterations: usize,
    /// Objective value of every accepted iterate, starting with the projected start point.
    pub trace: Vec<f64>,
}

/// Minimize `Tr(Q N)` over `PSD ∩ ellipsoid` by projected gradient descent.
pub fn projected_linear_min(
    q: &SymMatrix,
    spec: &EllipsoidSpec,
    settings: &SolverSettings,
    start: &SymMatrix,
) -> Result<LinearMinSolution> {
    settings.validate()?;
    if q.dim() != spec.dim() || start.dim() != spec.dim() {
        return Err(Error::invalid("objective, start point and ellipsoid dimensions differ"));
    }
    let qm = q.as_matrix();
    let step = settings.step_for(qm);
    let mut state = DykstraState::new(spec.dim());
    let mut n = dykstra_intersect_warm(start, spec, settings, &mut state)?;
    let mut objective = inner(qm, n.as_matrix());
    let mut trace = vec![objective];
    if qm.iter().all(|v| *v == 0.0) {
        return Ok(LinearMinSolution {
            point: n,
            objective,
            iterations: 0,
            trace,
        });
    }
    for it in 0..settings.max_iter {
        let target = SymMatrix(symmetrize(&(n.as_matrix() - qm * step)));
        let next = dykstra_intersect_warm(&target, spec, settings, &mut state)?;
        let next_objective = inner(qm, next.as_matrix());
        // Projection error can make the last few steps go uphill; stop there.
        if next_objective > objective + 1e-13 * objective.abs().max(1e-300) {
            return Ok(LinearMinSolution {
                point: n,
                objective,
                iterations: it,
                trace,
            });
        }
        let change = (next.as_matrix() - n.as_matrix()).norm();
        n = next;
        objective = next_objective;
        trace.push(objective);
        if change <= settings.tol * n.as_matrix().norm().max(1.0) {
            return Ok(LinearMinSolution {
                point: n,
                objective,
                iterations: it + 1,
                trace,
            });
        }
    }
    Err(Error::NonConvergence {
        what: "projected gradient",
        iterations: settings.max_iter,
        residual: objective,
    })
}

/// Result of [`multiplier_linear_min`].
#[derive(Debug, Clone)]
pub struct MultiplierSolution {
    pub point: SymMatrix,
    pub objective: f64,
    /// Multiplier of the ellipsoid constraint.
    pub multiplier: f64,
    /// Total inner iterations.
    pub iterations: usize,
}

/// `argmin_{Z ⪰ 0} ½ Σ w2_ij (Z_ij − T_ij)²` by accelerated projected gradient with restarts.
fn weighted_psd_nearest(
    target: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    start: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, usize)> {
    let lipschitz = w2.max();
    let mut z = psd_project(&SymMatrix(symmetrize(start)))?.0;
    let mut y = z.clone();
    let mut t: f64 = 1.0;
    for it in 0..max_iter {
        let grad = w2.component_mul(&(&y - target));
        let pre = symmetrize(&(&y - grad / lipschitz));
        // Eigendecomposition rounding scales with the unprojected point, which can dwarf `z`.
        let noise = 64.0 * f64::EPSILON * pre.norm();
        let z_new = psd_project(&SymMatrix(pre))?.0;
        let step = &z_new - &z;
        let change = step.norm();
        // Gradient restart: drop momentum once it points uphill.
        if inner(&(&y - &z_new), &step) > 0.0 {
            t = 1.0;
            y = z_new.clone();
        } else {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z_new + step * ((t - 1.0) / t_new);
            t = t_new;
        }
        z = z_new;
        if change <= (tol * z.norm().max(1.0)).max(noise) {
            return Ok((z, it + 1));
        }
    }
    Err(Error::NonConvergence {
        what: "weighted PSD projection",
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// Minimize `Tr(Q N)` over `PSD ∩ ellipsoid` through the ellipsoid multiplier.
///
/// For `μ > 0` the Lagrangian minimizer `N(μ) = argmin_{N ⪰ 0} Tr(QN) + μ g(N)` is a
/// weighted nearest-PSD point of `C − Q / (2μ w²)`, and `g(N(μ))` decreases in `μ`;
/// `μ` is bracketed and bisected on a log scale until the constraint is tight.
/// The returned point is on the feasible side of the root.
pub fn multiplier_linear_min(
    q: &SymMatrix,
    spec: &EllipsoidSpec,
    settings: &SolverSettings,
) -> Result<MultiplierSolution> {
    settings.validate()?;
    if q.dim() != spec.dim() {
        return Err(Error::invalid("objective and ellipsoid dimensions differ"));
    }
    let qm = q.as_matrix();
    let dim = spec.dim();
    let done = |z: DMatrix<f64>, multiplier: f64, iterations: usize| {
        let objective = inner(qm, &z);
        MultiplierSolution {
            point: SymMatrix(z),
            objective,
            multiplier,
            iterations,
        }
    };
    let center = spec.center.clone();
    if spec.radius_sq == 0.0 {
        return Ok(done(psd_project(&SymMatrix(center))?.0, f64::INFINITY, 0));
    }
    let q_min = linalg::sym_eigenvalues(qm)?.min();
    let origin = DMatrix::zeros(dim, dim);
    if q_min >= 0.0 && (!spec.is_active() || spec.constraint_value(&origin) <= spec.radius_sq) {
        return Ok(done(origin, 0.0, 0));
    }
    if !spec.is_active() {
        return Err(Error::invalid("objective is unbounded below on the PSD cone"));
    }
    let w2 = spec.weights.map(|w| w * w);
    let inner_tol = settings.tol * 1e-2;
    let mut iterations = 0usize;
    let mut warm = center.clone();
    let solve = |mu: f64, warm: &mut DMatrix<f64>, iterations: &mut usize| -> Result<(DMatrix<f64>, f64)> {
        let target = DMatrix::from_fn(dim, dim, |i, j| center[(i, j)] - qm[(i, j)] / (2.0 * mu * w2[(i, j)]));
        let (z, it) = weighted_psd_nearest(&target, &w2, warm, inner_tol, settings.max_iter)?;
        *iterations += it;
        *warm = z.clone();
        let g = spec.constraint_value(&z);
        Ok((z, g))
    };
    let radius = spec.radius_sq;
    let mut mu = qm.norm() / (2.0 * radius.sqrt());
    let (mut z, mut g) = solve(mu, &mut warm, &mut iterations)?;
    // Bracket: `lo` infeasible (g > radius), `hi` feasible.
    let (mut lo, mut hi, mut z_hi);
    if g <= radius {
        hi = mu;
        z_hi = z.clone();
        lo = mu;
        let mut halvings = 0;
        loop {
            lo *= 0.5;
            halvings += 1;
            let (zl, gl) = solve(lo, &mut warm, &mut iterations)?;
            if gl > radius {
                break;
            }
            hi = lo;
            z_hi = zl;
            if halvings > 200 {
                return Ok(done(z_hi, hi, iterations));
            }
        }
    } else {
        lo = mu;
        hi = mu;
        let mut doublings = 0;
        loop {
            hi *= 2.0;
            doublings += 1;
            let (zh, gh) = solve(hi, &mut warm, &mut iterations)?;
            if gh <= radius {
                z_hi = zh;
                break;
            }
            lo = hi;
            if doublings > 200 {
                return Err(Error::BracketFailure);
            }
        }
    }
    for _ in 0..200 {
        if hi / lo - 1.0 <= 1e-13 {
            break;
        }
        mu = (lo * hi).sqrt();
        (z, g) = solve(mu, &mut warm, &mut iterations)?;
        if g <= radius {
            hi = mu;
            z_hi = z;
            if radius - g <= settings.projection_tol * radius.max(1e-300) * 1e-2 {
                break;
            }
        } else {
            lo = mu;
        }
    }
    Ok(done(symmetrize(&z_hi), hi, iterations))
}

/// Euclidean projection onto `PSD ∩ ellipsoid` through the ellipsoid multiplier.
///
/// For `λ > 0` the minimizer of `½‖N − P‖² + ½λ Σ w_ij² (N − C)_ij²` over the cone is a
/// weighted nearest-PSD point; `λ` is bisected on a log scale until the constraint is
/// tight, keeping the feasible side. Better conditioned than [`dykstra_intersect`]
/// when the weights are large.
pub fn multiplier_project(p: &SymMatrix, spec: &EllipsoidSpec, settings: &SolverSettings) -> Result<SymMatrix> {
    settings.validate()?;
    if p.dim() != spec.dim() {
        return Err(Error::invalid("ellipsoid and matrix dimensions differ"));
    }
    let cone = psd_project(p)?;
    if !spec.is_active() || spec.constraint_value(cone.as_matrix()) <= spec.radius_sq {
        return Ok(cone);
    }
    let center_psd = psd_project(&SymMatrix(spec.center.clone()))?;
    if spec.radius_sq == 0.0 || spec.constraint_value(center_psd.as_matrix()) > spec.radius_sq {
        return Ok(center_psd);
    }
    let dim = spec.dim();
    let pm = p.as_matrix();
    let w2 = spec.weights.map(|w| w * w);
    let inner_tol = settings.tol * 1e-2;
    let radius = spec.radius_sq;
    let mut warm = cone.0.clone();
    let mut solve = |lam: f64| -> Result<(DMatrix<f64>, f64)> {
        let wt = w2.map(|w| 1.0 + lam * w);
        let target = DMatrix::from_fn(dim, dim, |i, j| {
            (pm[(i, j)] + lam * w2[(i, j)] * spec.center[(i, j)]) / wt[(i, j)]
        });
        let (z, _) = weighted_psd_nearest(&target, &wt, &warm, inner_tol, settings.max_iter)?;
        warm = z.clone();
        let g = spec.constraint_value(&z);
        Ok((z, g))
    };
    let mut lo = 0.0;
    let mut hi = 1.0 / w2.mean().max(f64::MIN_POSITIVE);
    let mut z_hi;
    let mut doublings = 0;
    loop {
        let (z, g) = solve(hi)?;
        if g <= radius {
            z_hi = z;
            break;
        }
        lo = hi;
        hi *= 4.0;
        doublings += 1;
        if doublings > 200 {
            return Err(Error::BracketFailure);
        }
    }
    if lo == 0.0 {
        lo = hi;
        loop {
            lo *= 0.25;
            let (z, g) = solve(lo)?;
            if g > radius {
                break;
            }
            hi = lo;
            z_hi = z;
            if lo < 1e-300 {
                return Ok(SymMatrix(symmetrize(&z_hi)));
            }
        }
    }
    for _ in 0..200 {
        if hi / lo - 1.0 <= 1e-13 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let (z, g) = solve(mid)?;
        if g <= radius {
            hi = mid;
            z_hi = z;
            if radius - g <= settings.projection_tol * radius * 1e-2 {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok(SymMatrix(symmetrize(&z_hi)))
}

/// First-order optimality certificate for `min Tr(Q N)` over `PSD ∩ ellipsoid`.
///
/// With `Λ = Q + μ ∇g(N)` the KKT conditions are `Λ ⪰ 0`, `⟨Λ, N⟩ = 0`,
/// `μ ≥ 0`, `μ g(N) = 0` and primal feasibility. `μ` is the least-squares
/// multiplier for `Λ N = 0`. Dual residuals are relative to `‖Q‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktResiduals {
    pub multiplier: f64,
    pub dual_psd: f64,
    pub complementarity: f64,
    pub constraint_slack: f64,
    pub primal_psd: f64,
    pub primal_ellipsoid: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.dual_psd,
            self.complementarity,
            self.constraint_slack,
            self.primal_psd,
            self.primal_ellipsoid,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn kkt_residuals(q: &SymMatrix, spec: &EllipsoidSpec, n: &SymMatrix) -> Result<KktResiduals> {
    let qm = q.as_matrix();
    let nm = n.as_matrix();
    let qscale = qm.norm().max(f64::MIN_POSITIVE);
    let nscale = nm.norm().max(1.0);
    let (grad, slack) = if spec.is_active() {
        (spec.constraint_gradient(nm), spec.constraint_value(nm) - spec.radius_sq)
    } else {
        (DMatrix::zeros(spec.dim(), spec.dim()), f64::NEG_INFINITY)
    };
    // Minimize ‖(Q + μ G) N‖_F over μ ≥ 0.
    let qn = qm * nm;
    let gn = &grad * nm;
    let denom = frob_sq(&gn);
    let mu = if denom > 0.0 { (-inner(&qn, &gn) / denom).max(0.0) } else { 0.0 };
    let lambda = symmetrize(&(qm + &grad * mu));
    let lambda_min = linalg::sym_eigenvalues(&lambda)?.min();
    let n_min = linalg::sym_eigenvalues(nm)?.min();
    let radius_scale = if spec.is_active() { spec.radius_sq.max(1e-300) } else { 1.0 };
    Ok(KktResiduals {
        multiplier: mu,
        dual_psd: (-lambda_min).max(0.0) / qscale,
        complementarity: (&lambda * nm).norm() / (qscale * nscale),
        constraint_slack: if spec.is_active() {
            (mu * slack.abs()) * grad.norm().max(1e-300) / (qscale * radius_scale.max(1.0))
        } else {
            0.0
        },
        primal_psd: (-n_min).max(0.0) / nscale,
        primal_ellipsoid: if spec.is_active() { slack.max(0.0) / radius_scale } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrized(&a).unwrap()
    }

    fn moore_penrose_residuals(a: &DMatrix<f64>, r: &DMatrix<f64>) -> [f64; 4] {
        let ar = a * r;
        let ra = r * a;
        [
            (&ar * a - a).norm(),
            (&ra * r - r).norm(),
            (&ar - ar.transpose()).norm(),
            (&ra - ra.transpose()).norm(),
        ]
    }

    #[test]
    fn pinv_identity_and_column() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((pseudo_inverse(&i3).unwrap() - &i3).norm() < 1e-14);
        let col = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let r = pseudo_inverse(&col).unwrap();
        assert_eq!(r.shape(), (1, 2));
        assert!((r[(0, 0)] - 0.5).abs() < 1e-14 && (r[(0, 1)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pinv_satisfies_moore_penrose_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = pseudo_inverse(&a).unwrap();
        for res in moore_penrose_residuals(&a, &r) {
            assert!(res <= 1e-10, "{res}");
        }
    }

    #[test]
    fn pinv_rejects_non_finite() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(matches!(pseudo_inverse(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn psd_projection_clips() {
        let s = SymMatrix::from_diagonal(&[2.0, -3.0]);
        let p = psd_project(&s).unwrap();
        assert!((p.as_matrix() - SymMatrix::from_diagonal(&[2.0, 0.0]).as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn psd_projection_fixes_psd_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let s = SymMatrix::symmetrized(&(&b * b.transpose())).unwrap();
        let p = psd_project(&s).unwrap();
        assert!((p.as_matrix() - s.as_matrix()).norm() < 1e-12);
    }

    /// Nearest PSD matrix by direct minimization of ‖L Lᵀ − S‖² over factors L,
    /// several random restarts, plain gradient descent with backtracking.
    fn factored_nearest_psd_distance(s: &DMatrix<f64>, seed: u64) -> f64 {
        let n = s.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let mut l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let f = |l: &DMatrix<f64>| (l * l.transpose() - s).norm_squared();
            let mut step = 0.1;
            for _ in 0..20000 {
                let r = &l * l.transpose() - s;
                let g = (&r + r.transpose()) * &l * 2.0;
                let fl = f(&l);
                loop {
                    let cand = &l - &g * step;
                    if f(&cand) <= fl - 1e-4 * step * g.norm_squared() || step < 1e-16 {
                        l = cand;
                        break;
                    }
                    step *= 0.5;
                }
                step *= 2.0;
                if g.norm() < 1e-12 {
                    break;
                }
            }
            best = best.min(f(&l).sqrt());
        }
        best
    }

    #[test]
    fn psd_projection_matches_factored_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sym(&mut rng, 4);
        let p = psd_project(&s).unwrap();
        let ours = (p.as_matrix() - s.as_matrix()).norm();
        let oracle = factored_nearest_psd_distance(s.as_matrix(), 99);
        assert!((ours - oracle).abs() < 1e-6, "ours {ours} oracle {oracle}");
    }

    #[test]
    fn ellipsoid_uniform_weights_is_ball_projection() {
        let c = DMatrix::<f64>::identity(2, 2);
        // P − C has Frobenius norm 2.
        let p = &c + DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let spec = EllipsoidSpec::ball(c.clone(), 1.0).unwrap();
        let out = ellipsoid_project(&SymMatrix::new(p.clone()).unwrap(), &spec).unwrap();
        let expected = &c + (&p - &c) * 0.5;
        assert!((out.as_matrix() - expected).norm() < 1e-12);
    }

    #[test]
    fn ellipsoid_interior_point_unchanged() {
        let spec = EllipsoidSpec::ball(DMatrix::identity(2, 2), 4.0).unwrap();
        let p = SymMatrix::from_diagonal(&[1.5, 0.5]);
        assert_eq!(ellipsoid_project(&p, &spec).unwrap(), p);
    }

    #[test]
    fn ellipsoid_weighted_projection_beats_sampled_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = SymMatrix::symmetrized(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(0.5..3.0)))
            .unwrap()
            .into_inner();
        let c = random_sym(&mut rng, 3).into_inner();
        let radius_sq = 0.3;
        let spec = EllipsoidSpec::new(w.clone(), c.clone(), radius_sq).unwrap();
        let p = SymMatrix::new(&c + random_sym(&mut rng, 3).into_inner() * 3.0).unwrap();
        assert!(spec.constraint_value(p.as_matrix()) > radius_sq);
        let out = ellipsoid_project(&p, &spec).unwrap();
        let g = spec.constraint_value(out.as_matrix());
        assert!((g - radius_sq).abs() <= 1e-10 * radius_sq, "constraint {g}");
        let ours = (out.as_matrix() - p.as_matrix()).norm();
        for _ in 0..10_000 {
            // Uniform direction in the sphere of symmetric deviations, scaled inside.
            let dir = random_sym(&mut rng, 3).into_inner();
            let scale = (radius_sq / spec.constraint_value(&(&c + &dir))).sqrt();
            let t: f64 = rng.random_range(0.0..1.0);
            let cand = &c + dir * (scale * t.sqrt());
            assert!(spec.constraint_value(&cand) <= radius_sq * (1.0 + 1e-12));
            assert!(ours <= (cand - p.as_matrix()).norm() + 1e-12);
        }
    }

    #[test]
    fn ellipsoid_zero_radius_returns_center() {
        let spec = EllipsoidSpec::ball(DMatrix::identity(2, 2), 0.0).unwrap();
        let out = ellipsoid_project(&SymMatrix::from_diagonal(&[3.0, -1.0]), &spec).unwrap();
        assert!((out.as_matrix() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn ellipsoid_spec_rejects_bad_weights() {
        let c = DMatrix::<f64>::identity(2, 2);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(EllipsoidSpec::new(w, c.clone(), 1.0).is_err());
        assert!(EllipsoidSpec::ball(c, -1.0).is_err());
    }

    #[test]
    fn dykstra_fixed_point_and_inactive_ellipsoid() {
        let spec = EllipsoidSpec::ball(DMatrix::identity(3, 3), 1.0).unwrap();
        let inside = SymMatrix::from_diagonal(&[1.2, 0.9, 1.0]);
        let out = dykstra_intersect(&inside, &spec, &SolverSettings::default()).unwrap();
        assert!((out.as_matrix() - inside.as_matrix()).norm() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_sym(&mut rng, 3);
        let open = EllipsoidSpec::ball(DMatrix::identity(3, 3), f64::INFINITY).unwrap();
        let out = dykstra_intersect(&p, &open, &SolverSettings::default()).unwrap();
        assert!((out.as_matrix() - psd_project(&p).unwrap().as_matrix()).norm() < 1e-14);
    }

    /// Penalized nearest point: minimize ‖N − P‖² + κ(‖min(eig,0)‖² + max(g − r, 0)²)
    /// for increasing κ, gradient descent with backtracking from the Dykstra-free start P.
    fn penalty_oracle(p: &DMatrix<f64>, spec: &EllipsoidSpec) -> DMatrix<f64> {
        let mut n = p.clone();
        let mut kappa = 10.0;
        let obj = |n: &DMatrix<f64>, kappa: f64| {
            let eig = linalg::sym_eigenvalues(n).unwrap();
            let neg: f64 = eig.iter().map(|v| v.min(0.0).powi(2)).sum();
            let ell = (spec.constraint_value(n) - spec.radius_sq()).max(0.0);
            (n - p).norm_squared() + kappa * (neg + ell * ell)
        };
        let grad = |n: &DMatrix<f64>, kappa: f64| {
            let (vals, vecs) = linalg::sym_eigen(n).unwrap();
            let neg = vals.map(|v| v.min(0.0));
            let g_psd = linalg::from_eigen(&neg, &vecs) * 2.0;
            let ell = (spec.constraint_value(n) - spec.radius_sq()).max(0.0);
            let g_ell = spec.constraint_gradient(n) * (2.0 * ell);
            (n - p) * 2.0 + (g_psd + g_ell) * kappa
        };
        for _ in 0..12 {
            let mut step = 1.0 / (2.0 + kappa);
            for _ in 0..4000 {
                let g = symmetrize(&grad(&n, kappa));
                let f0 = obj(&n, kappa);
                loop {
                    let cand = &n - &g * step;
                    if obj(&cand, kappa) <= f0 - 1e-4 * step * g.norm_squared() || step < 1e-18 {
                        n = cand;
                        break;
                    }
                    step *= 0.5;
                }
                step = (step * 2.0).min(1.0);
                if g.norm() < 1e-13 {
                    break;
                }
            }
            kappa *= 10.0;
        }
        n
    }

    #[test]
    fn dykstra_random_instance_matches_penalty_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.8, 0.5, 0.3]));
        let w = SymMatrix::symmetrized(&DMatrix::from_fn(3, 3, |_, _| rng.random_range(0.8..1.6)))
            .unwrap()
            .into_inner();
        let spec = EllipsoidSpec::new(w, c, 0.2).unwrap();
        let p = random_sym(&mut rng, 3);
        let p = SymMatrix::new(p.as_matrix() * 1.5).unwrap();
        let out = dykstra_intersect(&p, &spec, &SolverSettings::default()).unwrap();
        let psd_res = (-out.min_eigenvalue().unwrap()).max(0.0);
        let ell_res = spec.violation(out.as_matrix());
        assert!(psd_res <= 1e-8 && ell_res <= 1e-8, "psd {psd_res} ell {ell_res}");
        let oracle = penalty_oracle(p.as_matrix(), &spec);
        let d_ours = (out.as_matrix() - p.as_matrix()).norm();
        let d_oracle = (oracle - p.as_matrix()).norm();
        assert!((d_ours - d_oracle).abs() < 1e-5, "ours {d_ours} oracle {d_oracle}");
    }

    #[test]
    fn linear_min_zero_objective_projects_start() {
        let spec = EllipsoidSpec::ball(DMatrix::identity(2, 2) * 2.0, 0.5).unwrap();
        let start = SymMatrix::from_diagonal(&[5.0, -1.0]);
        let sol = projected_linear_min(&SymMatrix::zeros(2), &spec, &SolverSettings::default(), &start).unwrap();
        let expected = dykstra_intersect(&start, &spec, &SolverSettings::default()).unwrap();
        assert!((sol.point.as_matrix() - expected.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn linear_min_over_ball_has_closed_form() {
        let center = DMatrix::<f64>::identity(3, 3) * 2.0;
        let radius = 0.3_f64;
        let spec = EllipsoidSpec::ball(center.clone(), radius * radius).unwrap();
        let q = SymMatrix::identity(3);
        let sol = projected_linear_min(&q, &spec, &SolverSettings::default(), &SymMatrix::identity(3)).unwrap();
        let expected = &center - DMatrix::<f64>::identity(3, 3) * (radius / 3f64.sqrt());
        assert!((sol.point.as_matrix() - &expected).norm() < 1e-7);
        let kkt = kkt_residuals(&q, &spec, &sol.point).unwrap();
        // Interior of the PSD cone: Λ = Q + μ∇g must vanish, so use its norm.
        let lambda = q.as_matrix() + spec.constraint_gradient(sol.point.as_matrix()) * kkt.multiplier;
        assert!(lambda.norm() <= 1e-8, "stationarity {}", lambda.norm());
        assert!(kkt.primal_ellipsoid <= 1e-8);
    }

    #[test]
    fn linear_min_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let q = SymMatrix::symmetrized(&(&b * b.transpose() + DMatrix::identity(4, 4) * 0.1)).unwrap();
        let s = DVector::from_column_slice(&[3.0, 2.0, 1.5, 1.0]);
        let spec = EllipsoidSpec::distortion(&s, 2.0).unwrap();
        let start = SymMatrix::new(spec.center().clone()).unwrap();
        let sol = projected_linear_min(&q, &spec, &SolverSettings::default(), &start).unwrap();
        for pair in sol.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-15 * pair[0].abs());
        }
    }
}
