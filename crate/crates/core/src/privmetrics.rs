//! Empirical privacy audits: kNN differential entropy and mutual information.
//!
//! All values are in nats. Before any mutual-information estimate, samples are
//! expressed in principal coordinates of their support, keeping at most
//! [`MI_MAX_DIM`] components (see [`reduce_for_mi`]).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

pub const DEFAULT_K_NN: usize = 3;
/// Width of the seeded jitter used to break exact ties.
pub const JITTER_SCALE: f64 = 1e-12;
/// Fraction of zero k-th-neighbour distances tolerated after jitter.
pub const MAX_ZERO_FRACTION: f64 = 0.1;
pub const MI_MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimate {
    pub nats: f64,
    pub n: usize,
    pub k_nn: usize,
    pub dim: usize,
    /// Whether tie-breaking jitter was applied.
    pub jittered: bool,
    /// Points left out because their k-th neighbour distance stayed 0.
    pub zero_distances: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiMethod {
    Continuous,
    Categorical,
}

/// One weighted entropy term of an MI estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MiTerm {
    pub label: String,
    pub weight: f64,
    pub entropy: EntropyEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiEstimate {
    pub nats: f64,
    pub method: MiMethod,
    /// `nats` is `Σ weight · entropy.nats` over these terms, summed in order.
    pub components: Vec<MiTerm>,
}

impl MiEstimate {
    fn from_terms(method: MiMethod, components: Vec<MiTerm>) -> Self {
        let nats = recombine(&components);
        MiEstimate {
            nats,
            method,
            components,
        }
    }

    /// Sum of the weighted components; equals `nats` exactly.
    pub fn recombined(&self) -> f64 {
        recombine(&self.components)
    }
}

fn recombine(terms: &[MiTerm]) -> f64 {
    terms.iter().fold(0.0, |acc, t| acc + t.weight * t.entropy.nats)
}

/// `ln` of the volume of the unit Euclidean ball in `m` dimensions.
pub fn ln_unit_ball_volume(m: usize) -> f64 {
    let half = m as f64 / 2.0;
    half * std::f64::consts::PI.ln() - ln_gamma(half + 1.0)
}

/// Distance from every row to its `k`-th nearest other row (brute force).
fn kth_distances(x: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let n = x.nrows();
    // Row-major copy keeps the inner loop contiguous.
    let xt = x.transpose();
    let m = x.ncols();
    let row = |i: usize| &xt.as_slice()[i * m..(i + 1) * m];
    let mut buf = Vec::with_capacity(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            buf.clear();
            let a = row(i);
            for j in (0..n).filter(|&j| j != i) {
                let d2: f64 = a.iter().zip(row(j)).map(|(u, v)| (u - v) * (u - v)).sum();
                buf.push(d2);
            }
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            kth.sqrt()
        })
        .collect()
}

/// Kozachenko–Leonenko estimate `ψ(n) − ψ(k) + ln V_m + (m/n) Σ ln ε_i`.
///
/// When some k-th neighbour distance is exactly 0 every coordinate gets seeded
/// uniform jitter of width [`JITTER_SCALE`] and the distances are recomputed.
/// Points whose distance is still 0 are left out of the average; more than
/// [`MAX_ZERO_FRACTION`] of them is an error.
pub fn knn_entropy(samples: &DMatrix<f64>, k_nn: usize) -> Result<EntropyEstimate> {
    let (n, m) = samples.shape();
    if k_nn == 0 {
        return Err(Error::invalid("k_nn must be at least 1"));
    }
    if n < k_nn + 1 {
        return Err(Error::invalid(format!("need more than {k_nn} samples, got {n}")));
    }
    if m == 0 {
        return Err(Error::invalid("samples have no columns"));
    }
    if !linalg::all_finite(samples) {
        return Err(Error::NonFinite("entropy samples"));
    }
    let mut eps = kth_distances(samples, k_nn);
    let mut jittered = false;
    if eps.iter().any(|&e| e == 0.0) {
        let mut rng = seed::rng(0, "knn-jitter", 0);
        let noisy = samples.map(|v| v + rng.random_range(-JITTER_SCALE..JITTER_SCALE));
        eps = kth_distances(&noisy, k_nn);
        jittered = true;
    }
    let zeros = eps.iter().filter(|&&e| e == 0.0).count();
    let zero_fraction = zeros as f64 / n as f64;
    if zero_fraction > MAX_ZERO_FRACTION {
        return Err(Error::DegenerateSample {
            zero_fraction: 100.0 * zero_fraction,
        });
    }
    let used = n - zeros;
    let log_sum: f64 = eps.iter().filter(|&&e| e > 0.0).map(|e| e.ln()).sum();
    let nats = digamma(n as f64) - digamma(k_nn as f64) + ln_unit_ball_volume(m) + m as f64 * log_sum / used as f64;
    Ok(EntropyEstimate {
        nats,
        n,
        k_nn,
        dim: m,
        jittered,
        zero_distances: zeros,
    })
}

/// Centered PCA onto the leading components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `n × d` scores.
    pub projected: DMatrix<f64>,
    /// `p × d` orthonormal directions.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Share of total variance kept; 1 for zero-variance data.
    pub explained_fraction: f64,
}

pub fn pca_project(x: &DMatrix<f64>, d: usize) -> Result<PcaProjection> {
    let (n, p) = x.shape();
    if d > p {
        return Err(Error::invalid(format!("cannot keep {d} components of {p} columns")));
    }
    if n == 0 {
        return Err(Error::invalid("no samples"));
    }
    let mean = linalg::column_means(x);
    let centered = linalg::center_columns(x);
    let cov = centered.transpose() * &centered / n as f64;
    let (vals, vecs) = linalg::sym_eigen(&cov)?;
    let components = vecs.columns(0, d).into_owned();
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let kept: f64 = vals.iter().take(d).map(|v| v.max(0.0)).sum();
    let explained_fraction = if total > 0.0 { kept / total } else { 1.0 };
    Ok(PcaProjection {
        projected: &centered * &components,
        components,
        mean,
        explained_fraction,
    })
}

/// Relative eigenvalue below which a principal direction counts as empty.
pub const SUPPORT_CUT: f64 = 1e-9;

/// Number of principal directions with variance above [`SUPPORT_CUT`] times the largest.
pub fn support_dimension(x: &DMatrix<f64>) -> Result<usize> {
    let centered = linalg::center_columns(x);
    let cov = centered.transpose() * &centered / x.nrows().max(1) as f64;
    let vals = linalg::sym_eigenvalues(&cov)?;
    let top = vals.max();
    if !(top > 0.0) {
        return Ok(0);
    }
    Ok(vals.iter().filter(|&&v| v > SUPPORT_CUT * top).count())
}

/// Coordinates for MI estimation: whitened principal coordinates of the sample's support.
///
/// The sample is centered, rotated onto its principal directions with variance above
/// [`SUPPORT_CUT`] times the largest, truncated to at most [`MI_MAX_DIM`] of them and
/// scaled to unit variance per direction. On the support this is an invertible affine
/// map, so the underlying mutual information is unchanged. A constant sample is
/// returned as is.
pub fn reduce_for_mi(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    reduce_for_mi_to(x, MI_MAX_DIM)
}

/// [`reduce_for_mi`] with a caller-chosen cap on the number of components.
pub fn reduce_for_mi_to(x: &DMatrix<f64>, max_dim: usize) -> Result<DMatrix<f64>> {
    if max_dim == 0 {
        return Err(Error::invalid("max_dim must be at least 1"));
    }
    let support = support_dimension(x)?;
    if support == 0 {
        return Ok(x.clone());
    }
    let d = support.min(max_dim);
    let pca = pca_project(x, d)?;
    let mut z = pca.projected;
    let n = z.nrows() as f64;
    for mut col in z.column_iter_mut() {
        let sd = (col.norm_squared() / n).sqrt();
        col /= sd;
    }
    Ok(z)
}

fn term(label: &str, weight: f64, samples: &DMatrix<f64>, k_nn: usize) -> Result<MiTerm> {
    Ok(MiTerm {
        label: label.to_string(),
        weight,
        entropy: knn_entropy(samples, k_nn)?,
    })
}

/// `Ĥ(X) + Ĥ(Y) − Ĥ(X, Y)`, the joint sample being the column concatenation.
pub fn mi_continuous(x: &DMatrix<f64>, y: &DMatrix<f64>, k_nn: usize) -> Result<MiEstimate> {
    mi_continuous_with(x, y, k_nn, MI_MAX_DIM)
}

pub fn mi_continuous_with(x: &DMatrix<f64>, y: &DMatrix<f64>, k_nn: usize, max_dim: usize) -> Result<MiEstimate> {
    if x.nrows() != y.nrows() {
        return Err(Error::invalid("X and Y differ in sample count"));
    }
    let xr = reduce_for_mi_to(x, max_dim)?;
    let yr = reduce_for_mi_to(y, max_dim)?;
    let (n, px) = xr.shape();
    let py = yr.ncols();
    let joint = DMatrix::from_fn(n, px + py, |i, j| if j < px { xr[(i, j)] } else { yr[(i, j - px)] });
    Ok(MiEstimate::from_terms(
        MiMethod::Continuous,
        vec![
            term("H(X)", 1.0, &xr, k_nn)?,
            term("H(Y)", 1.0, &yr, k_nn)?,
            term("H(X,Y)", -1.0, &joint, k_nn)?,
        ],
    ))
}

/// `Ĥ(X) − Σ_c p̂(c) Ĥ(X | Y = c)` with sample-frequency priors.
///
/// A class absent from `y` has prior 0 and contributes no term.
pub fn mi_categorical(x: &DMatrix<f64>, y: &LabelSet, k_nn: usize) -> Result<MiEstimate> {
    mi_categorical_with(x, y, k_nn, MI_MAX_DIM)
}

pub fn mi_categorical_with(x: &DMatrix<f64>, y: &LabelSet, k_nn: usize, max_dim: usize) -> Result<MiEstimate> {
    let yv = y.as_binary()?;
    if yv.len() != x.nrows() {
        return Err(Error::invalid("X and labels differ in sample count"));
    }
    let xr = reduce_for_mi_to(x, max_dim)?;
    let n = yv.len();
    let mut terms = vec![term("H(X)", 1.0, &xr, k_nn)?];
    for (label, name) in [(-1i8, "H(X|Y=-1)"), (1i8, "H(X|Y=+1)")] {
        let rows: Vec<usize> = (0..n).filter(|&i| yv[i] == f64::from(label)).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < k_nn + 1 {
            return Err(Error::ClassTooSmall {
                label,
                count: rows.len(),
                needed: k_nn + 1,
            });
        }
        let weight = rows.len() as f64 / n as f64;
        terms.push(term(name, -weight, &linalg::select_rows(&xr, &rows), k_nn)?);
    }
    Ok(MiEstimate::from_terms(MiMethod::Categorical, terms))
}
