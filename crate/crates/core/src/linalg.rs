//! Small dense linear-algebra helpers shared by the mechanisms.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Condition number above which a Gram matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e13;

/// Relative cut for the numerical rank of a data matrix.
pub const RANK_CUT: f64 = 1e-12;

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `Tr(Aᵀ B)`.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !all_finite(m) {
        return Err(Error::NonFinite("symmetric eigendecomposition"));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 0).ok_or(Error::Decomposition)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    sym_eigen(m).map(|(v, _)| v)
}

/// Rebuild `V diag(λ) Vᵀ`.
pub fn from_eigen(values: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    symmetrize(&(scaled * vectors.transpose()))
}

/// Thin SVD truncated at the numerical rank.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// n×r, orthonormal columns.
    pub u: DMatrix<f64>,
    /// r singular values, descending, strictly positive.
    pub s: DVector<f64>,
    /// p×r, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }
}

pub fn thin_svd(x: &DMatrix<f64>) -> Result<ThinSvd> {
    if !all_finite(x) {
        return Err(Error::NonFinite("SVD input"));
    }
    let svd = SVD::try_new(x.clone(), true, true, f64::EPSILON, 0).ok_or(Error::Decomposition)?;
    let u = svd.u.ok_or(Error::Decomposition)?;
    let vt = svd.v_t.ok_or(Error::Decomposition)?;
    let m = svd.singular_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let top = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| top > 0.0 && svd.singular_values[i] > RANK_CUT * top)
        .collect();
    let r = keep.len();
    let mut uo = DMatrix::zeros(x.nrows(), r);
    let mut vo = DMatrix::zeros(x.ncols(), r);
    let mut s = DVector::zeros(r);
    for (dst, &src) in keep.iter().enumerate() {
        uo.set_column(dst, &u.column(src));
        vo.set_column(dst, &vt.row(src).transpose());
        s[dst] = svd.singular_values[src];
    }
    Ok(ThinSvd { u: uo, s, v: vo })
}

/// Solve `A Z = B` for symmetric positive definite `A`, reporting near-singularity.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let values = sym_eigenvalues(a)?;
    let hi = values.max();
    let lo = values.min();
    if !(lo > 0.0) || hi / lo > SINGULAR_CONDITION {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::SingularCompression { condition });
    }
    let chol = symmetrize(a).cholesky().ok_or(Error::SingularCompression {
        condition: hi / lo,
    })?;
    Ok(chol.solve(b))
}

/// Least-squares solution of `X β ≈ Y` via the thin SVD (minimum norm when rank deficient).
pub fn lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = thin_svd(x)?;
    let uty = svd.u.transpose() * y;
    let mut scaled = uty;
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row /= svd.s[i];
    }
    Ok(&svd.v * scaled)
}

/// Append a leading column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (x.nrows(), x.ncols())).copy_from(x);
    out
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(x);
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j])
}
