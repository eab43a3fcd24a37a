//! Feature/label containers, synthetic generators, normalization and splits.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::seed;

/// Releasable data: `n` samples by `p` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    column_names: Option<Vec<String>>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("feature matrix needs at least one row and one column"));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(FeatureMatrix {
            values,
            column_names: None,
        })
    }

    pub fn with_names(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::invalid(format!(
                "{} column names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        let mut fm = Self::new(values)?;
        fm.column_names = Some(names);
        Ok(fm)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Names, falling back to `x1..xp`.
    pub fn names_or_default(&self) -> Vec<String> {
        match &self.column_names {
            Some(n) => n.clone(),
            None => (1..=self.ncols()).map(|j| format!("x{j}")).collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Same column names, new values of identical width.
    pub fn replace_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != self.ncols() {
            return Err(Error::invalid("replacement values change the column count"));
        }
        let mut out = Self::new(values)?;
        out.column_names = self.column_names.clone();
        Ok(out)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        self.replace_values(crate::linalg::select_rows(&self.values, rows))
    }
}

/// Private labels.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSet {
    /// `n × d` real targets.
    Continuous(DMatrix<f64>),
    /// `n` labels in `{−1, +1}`.
    Binary(DVector<f64>),
}

impl LabelSet {
    pub fn continuous(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("continuous labels need at least one row and column"));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("continuous labels"));
        }
        Ok(LabelSet::Continuous(values))
    }

    pub fn binary(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("binary labels are empty"));
        }
        if let Some(bad) = values.iter().find(|v| **v != 1.0 && **v != -1.0) {
            return Err(Error::invalid(format!("binary label {bad} is not -1 or +1")));
        }
        Ok(LabelSet::Binary(values))
    }

    pub fn len(&self) -> usize {
        match self {
            LabelSet::Continuous(m) => m.nrows(),
            LabelSet::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_continuous(&self) -> Result<&DMatrix<f64>> {
        match self {
            LabelSet::Continuous(m) => Ok(m),
            LabelSet::Binary(_) => Err(Error::invalid("expected continuous labels, got binary")),
        }
    }

    pub fn as_binary(&self) -> Result<&DVector<f64>> {
        match self {
            LabelSet::Binary(v) => Ok(v),
            LabelSet::Continuous(_) => Err(Error::invalid("expected binary labels, got continuous")),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        match self {
            LabelSet::Continuous(m) => LabelSet::Continuous(crate::linalg::select_rows(m, rows)),
            LabelSet::Binary(v) => LabelSet::Binary(DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))),
        }
    }
}

/// Synthetic continuous-label data with its generating parameters.
#[derive(Debug, Clone)]
pub struct LinearGaussianData {
    pub features: FeatureMatrix,
    pub labels: LabelSet,
    /// Standard-normal design before min-max normalization.
    pub raw: DMatrix<f64>,
    /// `p × d` coefficients with `Y = raw · theta_star + ε`.
    pub theta_star: DMatrix<f64>,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Fill row by row so the draw order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn gen_linear_gaussian(n: usize, p: usize, d: usize, noise_std: f64, seed: u64) -> Result<LinearGaussianData> {
    if !(n > p && p >= d && d >= 1) {
        return Err(Error::invalid(format!("need n > p >= d >= 1, got n={n} p={p} d={d}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std must be finite and nonnegative"));
    }
    let mut rng = seed::rng(seed, "linear-gaussian", 0);
    let raw = normal_matrix(&mut rng, n, p);
    let theta_star = normal_matrix(&mut rng, p, d);
    let noise = normal_matrix(&mut rng, n, d) * noise_std;
    let y = &raw * &theta_star + noise;
    let (features, _) = minmax_normalize(&FeatureMatrix::new(raw.clone())?);
    Ok(LinearGaussianData {
        features,
        labels: LabelSet::continuous(y)?,
        raw,
        theta_star,
    })
}

/// Synthetic binary-label data with a planted linear direction.
#[derive(Debug, Clone)]
pub struct LogisticPlantedData {
    pub features: FeatureMatrix,
    pub labels: LabelSet,
    /// Unit-norm planted direction.
    pub theta_star: DVector<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Standard-normal features; `P(y = +1 | x) = σ(signal · θ*ᵀx)` with unit `θ*`.
pub fn gen_logistic_planted(n: usize, p: usize, signal_strength: f64, seed: u64) -> Result<LogisticPlantedData> {
    if n < 20 || p == 0 {
        return Err(Error::invalid(format!("need n >= 20 and p >= 1, got n={n} p={p}")));
    }
    if !(signal_strength >= 0.0 && signal_strength.is_finite()) {
        return Err(Error::invalid("signal_strength must be finite and nonnegative"));
    }
    let mut rng = seed::rng(seed, "logistic-planted", 0);
    let x = normal_matrix(&mut rng, n, p);
    let dir = normal_matrix(&mut rng, p, 1).column(0).into_owned();
    let theta_star = &dir / dir.norm();
    let margins = &x * &theta_star;
    let labels = DVector::from_iterator(
        n,
        margins.iter().map(|&m| {
            let u: f64 = rng.random();
            if u < sigmoid(signal_strength * m) {
                1.0
            } else {
                -1.0
            }
        }),
    );
    Ok(LogisticPlantedData {
        features: FeatureMatrix::new(x)?,
        labels: LabelSet::binary(labels)?,
        theta_star,
    })
}

/// Synthetic `side × side` images for the neural mechanism.
#[derive(Debug, Clone)]
pub struct PlantedImages {
    pub features: FeatureMatrix,
    pub labels: LabelSet,
    pub side: usize,
    /// Row-major pixel indices of the label-carrying 2×2 block.
    pub block: [usize; 4],
}

/// Images built from `latent` smooth Gaussian bumps around a grey level of 0.5; the label is
/// the sign of the mean of a fixed 2×2 block (relative to 0.5) plus a little noise.
pub fn gen_planted_images(n: usize, side: usize, latent: usize, seed: u64) -> Result<PlantedImages> {
    if n < 20 || side < 4 || latent == 0 {
        return Err(Error::invalid("need n >= 20, side >= 4 and at least one latent factor"));
    }
    let p = side * side;
    let mut rng = seed::rng(seed, "planted-images", 0);
    let mut basis = DMatrix::zeros(p, latent);
    for l in 0..latent {
        let cr: f64 = rng.random_range(0.0..side as f64);
        let cc: f64 = rng.random_range(0.0..side as f64);
        let width: f64 = rng.random_range(1.0..2.5);
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                basis[(r * side + c, l)] = (-d2 / (2.0 * width * width)).exp();
            }
        }
        let norm = basis.column(l).norm();
        basis.column_mut(l).unscale_mut(norm);
    }
    let z = normal_matrix(&mut rng, n, latent);
    let noise = normal_matrix(&mut rng, n, p) * 0.02;
    let x = (z * basis.transpose()) * 0.3 + noise + DMatrix::from_element(n, p, 0.5);
    let top = side / 2 - 1;
    let block = [top * side + top, top * side + top + 1, (top + 1) * side + top, (top + 1) * side + top + 1];
    let labels = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let mean = block.iter().map(|&j| x[(i, j)]).sum::<f64>() / 4.0;
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
            if mean - 0.5 + e >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }),
    );
    Ok(PlantedImages {
        features: FeatureMatrix::new(x)?,
        labels: LabelSet::binary(labels)?,
        side,
        block,
    })
}

/// Per-column `[min, max]` used by [`minmax_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxRecord {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxRecord {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let mins = x.column_iter().map(|c| c.min()).collect();
        let maxs = x.column_iter().map(|c| c.max()).collect();
        MinMaxRecord { mins, maxs }
    }

    /// Map each column affinely with the recorded range; constant columns go to 0.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let range = self.maxs[j] - self.mins[j];
            if range > 0.0 {
                (x[(i, j)] - self.mins[j]) / range
            } else {
                0.0
            }
        })
    }

    pub fn invert(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let range = self.maxs[j] - self.mins[j];
            if range > 0.0 {
                x[(i, j)] * range + self.mins[j]
            } else {
                self.mins[j]
            }
        })
    }
}

pub fn minmax_normalize(x: &FeatureMatrix) -> (FeatureMatrix, MinMaxRecord) {
    let record = MinMaxRecord::fit(x.values());
    let values = record.apply(x.values());
    let out = x.replace_values(values).expect("normalized values are finite");
    (out, record)
}

pub fn denormalize(x: &FeatureMatrix, record: &MinMaxRecord) -> Result<FeatureMatrix> {
    if record.mins.len() != x.ncols() {
        return Err(Error::invalid("normalization record width does not match"));
    }
    x.replace_values(record.invert(x.values()))
}

/// A train/test split with the training rows grouped into batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBatches {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Partition of `train_indices`.
    pub batches: Vec<Vec<usize>>,
    /// Partition of `test_indices` under the same batching rule.
    pub test_batches: Vec<Vec<usize>>,
}

impl SplitBatches {
    pub fn n(&self) -> usize {
        self.train_indices.len() + self.test_indices.len()
    }
}

/// Chunk `indices` into groups of `batch_size`; a trailing group with at most
/// `min_rows_exclusive` rows is merged into its predecessor.
pub fn batch_indices(indices: &[usize], batch_size: usize, min_rows_exclusive: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size <= min_rows_exclusive {
        return Err(Error::invalid(format!(
            "batch size {batch_size} must exceed the feature count {min_rows_exclusive}"
        )));
    }
    let mut batches: Vec<Vec<usize>> = indices.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map(|b| b.len() <= min_rows_exclusive).unwrap_or(false) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}

pub fn split_and_batch(
    x: &FeatureMatrix,
    y: &LabelSet,
    train_fraction: f64,
    batch_size: usize,
    seed: u64,
) -> Result<SplitBatches> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::invalid(format!("{} labels for {} samples", y.len(), n)));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie strictly between 0 and 1"));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid("split leaves the train or test side empty"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "split", 0));
    let train_indices = order[..n_train].to_vec();
    let test_indices = order[n_train..].to_vec();
    let batches = batch_indices(&train_indices, batch_size, p)?;
    let test_batches = batch_indices(&test_indices, batch_size, p)?;
    Ok(SplitBatches {
        train_indices,
        test_indices,
        batches,
        test_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{lstsq, with_intercept};

    #[test]
    fn linear_gaussian_is_deterministic() {
        let a = gen_linear_gaussian(50, 5, 2, 0.1, 9).unwrap();
        let b = gen_linear_gaussian(50, 5, 2, 0.1, 9).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let c = gen_linear_gaussian(50, 5, 2, 0.1, 10).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn noiseless_linear_model_is_recovered() {
        let data = gen_linear_gaussian(60, 6, 2, 0.0, 1).unwrap();
        let theta = lstsq(&data.raw, data.labels.as_continuous().unwrap()).unwrap();
        assert!((theta - &data.theta_star).amax() < 1e-8);
    }

    #[test]
    fn residual_standard_error_tracks_noise() {
        let (n, p) = (500, 10);
        let data = gen_linear_gaussian(n, p, 1, 0.1, 4).unwrap();
        let y = data.labels.as_continuous().unwrap();
        let design = with_intercept(&data.raw);
        let coef = lstsq(&design, y).unwrap();
        let resid = y - &design * coef;
        let rse = (resid.norm_squared() / (n - p - 1) as f64).sqrt();
        assert!((rse - 0.1).abs() <= 0.02, "rse {rse}");
    }

    #[test]
    fn linear_gaussian_rejects_bad_dims() {
        assert!(gen_linear_gaussian(5, 5, 1, 0.1, 0).is_err());
        assert!(gen_linear_gaussian(10, 2, 3, 0.1, 0).is_err());
        assert!(gen_linear_gaussian(10, 2, 1, -1.0, 0).is_err());
    }

    fn accuracy(pred: impl Iterator<Item = f64>, y: &DVector<f64>) -> f64 {
        pred.zip(y.iter()).filter(|(a, b)| a.signum() == b.signum()).count() as f64 / y.len() as f64
    }

    #[test]
    fn planted_logistic_oracle_accuracy() {
        let data = gen_logistic_planted(2000, 8, 5.0, 3).unwrap();
        let y = data.labels.as_binary().unwrap();
        let margins = data.features.values() * &data.theta_star;
        assert!(accuracy(margins.iter().cloned(), y) >= 0.85);
        let positive = y.iter().filter(|v| **v > 0.0).count() as f64 / y.len() as f64;
        assert!((0.4..=0.6).contains(&positive));
        let again = gen_logistic_planted(2000, 8, 5.0, 3).unwrap();
        assert_eq!(again.features, data.features);
        assert_eq!(again.labels, data.labels);
    }

    #[test]
    fn planted_images_are_balanced_and_valid() {
        let im = gen_planted_images(400, 8, 12, 5).unwrap();
        assert_eq!(im.features.ncols(), 64);
        let y = im.labels.as_binary().unwrap();
        let positive = y.iter().filter(|v| **v > 0.0).count() as f64 / y.len() as f64;
        assert!((0.3..=0.7).contains(&positive), "{positive}");
    }

    #[test]
    fn minmax_maps_columns() {
        let x = FeatureMatrix::new(DMatrix::from_row_slice(3, 2, &[2.0, 5.0, 4.0, 5.0, 6.0, 5.0])).unwrap();
        let (z, rec) = minmax_normalize(&x);
        assert_eq!(z.values().column(0).as_slice(), &[0.0, 0.5, 1.0]);
        assert_eq!(z.values().column(1).as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(rec.mins, vec![2.0, 5.0]);
    }

    #[test]
    fn split_has_expected_sizes() {
        let data = gen_linear_gaussian(100, 4, 1, 0.1, 2).unwrap();
        let s = split_and_batch(&data.features, &data.labels, 0.8, 30, 7).unwrap();
        assert_eq!(s.train_indices.len(), 80);
        assert_eq!(s.test_indices.len(), 20);
        let mut all: Vec<usize> = s.batches.iter().flatten().cloned().collect();
        all.sort_unstable();
        let mut train = s.train_indices.clone();
        train.sort_unstable();
        assert_eq!(all, train);
        assert!(s.batches.iter().all(|b| b.len() > 4));
        assert_eq!(s, split_and_batch(&data.features, &data.labels, 0.8, 30, 7).unwrap());
    }

    #[test]
    fn short_tail_batch_is_merged() {
        let idx: Vec<usize> = (0..23).collect();
        let b = batch_indices(&idx, 10, 4).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 13);
        assert!(batch_indices(&idx, 4, 4).is_err());
    }
}
