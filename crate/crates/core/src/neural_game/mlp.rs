//! Dense networks with optional batch normalization and exact backpropagation.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Linear,
    Softmax,
}

/// Layer `l` maps `layer_dims[l] → layer_dims[l + 1]`: affine, then batch norm if flagged, then activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub batch_norm: Vec<bool>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>, batch_norm: Vec<bool>) -> Result<Self> {
        let spec = MlpSpec {
            layer_dims,
            activations,
            batch_norm,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Holder network `p + 1 → hidden → p`: ReLU with batch norm, then a linear read-out.
    pub fn holder(p: usize, hidden: usize) -> Self {
        MlpSpec {
            layer_dims: vec![p + 1, hidden, p],
            activations: vec![Activation::Relu, Activation::Linear],
            batch_norm: vec![true, false],
        }
    }

    /// Attacker network `p → hidden → 2`: leaky ReLU with batch norm, then softmax.
    pub fn attacker(p: usize, hidden: usize) -> Self {
        MlpSpec {
            layer_dims: vec![p, hidden, 2],
            activations: vec![Activation::LeakyRelu, Activation::Softmax],
            batch_norm: vec![true, false],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.activations.len();
        if l == 0 || self.layer_dims.len() != l + 1 || self.batch_norm.len() != l {
            return Err(Error::invalid(
                "an MLP needs at least one layer and matching dims, activations and batch-norm flags",
            ));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.activations[..l - 1].contains(&Activation::Softmax) {
            return Err(Error::invalid("softmax is only allowed on the final layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: RowDVector<f64>,
    pub shift: RowDVector<f64>,
    pub running_mean: RowDVector<f64>,
    pub running_var: RowDVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `in × out`.
    pub w: DMatrix<f64>,
    pub b: RowDVector<f64>,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Minibatch statistics.
    Train,
    /// Running statistics.
    Inference,
}

struct LayerCache {
    input: DMatrix<f64>,
    /// Normalized pre-activation (`x̂`) when batch norm is active.
    normalized: Option<DMatrix<f64>>,
    inv_std: Option<RowDVector<f64>>,
    batch_mean: Option<RowDVector<f64>>,
    batch_var: Option<RowDVector<f64>>,
    pre_activation: DMatrix<f64>,
    output: DMatrix<f64>,
}

/// Activations of one forward pass, kept for [`MlpParams::backward`].
pub struct ForwardPass {
    mode: Mode,
    layers: Vec<LayerCache>,
}

impl ForwardPass {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.layers.last().expect("at least one layer").output
    }
}

/// Gradient with respect to the network output, or softmax cross-entropy against one-hot targets.
pub enum Upstream<'a> {
    Grad(&'a DMatrix<f64>),
    /// `(1/n) Σ −log p_{i, class_i}`; only valid for a softmax output.
    CrossEntropy(&'a [usize]),
}

fn apply_activation(act: Activation, z: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::LeakyRelu => z.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
        Activation::Linear => z.clone(),
        Activation::Softmax => {
            let mut out = z.clone();
            for mut row in out.row_iter_mut() {
                let m = row.max();
                row.apply(|v| *v = (*v - m).exp());
                let s = row.sum();
                row /= s;
            }
            out
        }
    }
}

fn activation_backward(act: Activation, z: &DMatrix<f64>, out: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Relu => g.zip_map(z, |gv, zv| if zv > 0.0 { gv } else { 0.0 }),
        Activation::LeakyRelu => g.zip_map(z, |gv, zv| if zv > 0.0 { gv } else { LEAKY_SLOPE * gv }),
        Activation::Linear => g.clone(),
        Activation::Softmax => {
            let mut dz = DMatrix::zeros(g.nrows(), g.ncols());
            for i in 0..g.nrows() {
                let dot: f64 = (0..g.ncols()).map(|j| g[(i, j)] * out[(i, j)]).sum();
                for j in 0..g.ncols() {
                    dz[(i, j)] = out[(i, j)] * (g[(i, j)] - dot);
                }
            }
            dz
        }
    }
}

fn column_mean(z: &DMatrix<f64>) -> RowDVector<f64> {
    z.row_sum() / z.nrows() as f64
}

fn broadcast_rows(z: &DMatrix<f64>, row: &RowDVector<f64>, f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| f(z[(i, j)], row[j]))
}

impl MlpParams {
    /// He-scaled Gaussian weights, zero biases, unit batch-norm scale.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.n_layers());
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let sd = (2.0 / fan_in as f64).sqrt();
            let w = DMatrix::from_fn(fan_in, fan_out, |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
            let bn = spec.batch_norm[l].then(|| BatchNormParams {
                scale: RowDVector::from_element(fan_out, 1.0),
                shift: RowDVector::zeros(fan_out),
                running_mean: RowDVector::zeros(fan_out),
                running_var: RowDVector::from_element(fan_out, 1.0),
            });
            layers.push(LayerParams {
                w,
                b: RowDVector::zeros(fan_out),
                bn,
            });
        }
        Ok(MlpParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.layer_dims.last().expect("validated spec")
    }

    fn uses_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    pub fn forward(&self, x: &DMatrix<f64>, mode: Mode) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, batch has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        if mode == Mode::Train && self.uses_batch_norm() && x.nrows() < 2 {
            return Err(Error::invalid("batch normalization needs at least 2 rows per batch"));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &a * &layer.w;
            for mut row in z.row_iter_mut() {
                row += &layer.b;
            }
            let (mut normalized, mut inv_std, mut batch_mean, mut batch_var) = (None, None, None, None);
            if let Some(bn) = &layer.bn {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = column_mean(&z);
                        let centered = broadcast_rows(&z, &mean, |v, m| v - m);
                        let var = column_mean(&centered.map(|v| v * v));
                        (mean, var)
                    }
                    Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let istd = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| (z[(i, j)] - mean[j]) * istd[j]);
                z = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| xhat[(i, j)] * bn.scale[j] + bn.shift[j]);
                normalized = Some(xhat);
                inv_std = Some(istd);
                if mode == Mode::Train {
                    batch_mean = Some(mean);
                    batch_var = Some(var);
                }
            }
            let out = apply_activation(self.spec.activations[l], &z);
            caches.push(LayerCache {
                input: a,
                normalized,
                inv_std,
                batch_mean,
                batch_var,
                pre_activation: z,
                output: out.clone(),
            });
            a = out;
        }
        Ok(ForwardPass { mode, layers: caches })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &DMatrix<f64>, mode: Mode) -> Result<DMatrix<f64>> {
        Ok(self.forward(x, mode)?.layers.pop().expect("at least one layer").output)
    }

    /// Move running statistics toward the minibatch statistics of a training pass.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (layer, cache) in self.layers.iter_mut().zip(&pass.layers) {
            if let (Some(bn), Some(m), Some(v)) = (&mut layer.bn, &cache.batch_mean, &cache.batch_var) {
                bn.running_mean = &bn.running_mean * BN_MOMENTUM + m * (1.0 - BN_MOMENTUM);
                bn.running_var = &bn.running_var * BN_MOMENTUM + v * (1.0 - BN_MOMENTUM);
            }
        }
    }

    /// Replace running statistics with the statistics of `x` itself.
    pub fn calibrate_running_stats(&mut self, x: &DMatrix<f64>) -> Result<()> {
        let pass = self.forward(x, Mode::Train)?;
        for (layer, cache) in self.layers.iter_mut().zip(&pass.layers) {
            if let (Some(bn), Some(m), Some(v)) = (&mut layer.bn, &cache.batch_mean, &cache.batch_var) {
                bn.running_mean = m.clone();
                bn.running_var = v.clone();
            }
        }
        Ok(())
    }

    /// Gradients of the composed loss with respect to every trainable parameter, and the input.
    pub fn backward(&self, pass: &ForwardPass, upstream: Upstream<'_>) -> Result<(MlpGrads, DMatrix<f64>)> {
        let last = self.layers.len() - 1;
        let n = pass.layers[0].input.nrows() as f64;
        let out = pass.output();
        let mut dz = match upstream {
            Upstream::Grad(g) => {
                if g.shape() != out.shape() {
                    return Err(Error::invalid("upstream gradient shape differs from the output"));
                }
                activation_backward(
                    self.spec.activations[last],
                    &pass.layers[last].pre_activation,
                    out,
                    g,
                )
            }
            Upstream::CrossEntropy(classes) => {
                if self.spec.activations[last] != Activation::Softmax {
                    return Err(Error::invalid("cross-entropy needs a softmax output"));
                }
                if classes.len() != out.nrows() || classes.iter().any(|&c| c >= out.ncols()) {
                    return Err(Error::invalid("class indices do not match the output"));
                }
                let mut d = out.clone();
                for (i, &c) in classes.iter().enumerate() {
                    d[(i, c)] -= 1.0;
                }
                d / n
            }
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let cache = &pass.layers[l];
            if l != last {
                // dz currently holds the gradient on this layer's output.
                dz = activation_backward(self.spec.activations[l], &cache.pre_activation, &cache.output, &dz);
            }
            let mut bn_grad = None;
            if let Some(bn) = &layer.bn {
                let xhat = cache.normalized.as_ref().expect("cached");
                let istd = cache.inv_std.as_ref().expect("cached");
                let dscale = dz.component_mul(xhat).row_sum();
                let dshift = dz.row_sum();
                let dxhat = broadcast_rows(&dz, &bn.scale, |g, s| g * s);
                dz = match pass.mode {
                    Mode::Inference => broadcast_rows(&dxhat, istd, |g, s| g * s),
                    Mode::Train => {
                        let m = dz.nrows() as f64;
                        let sum_d = dxhat.row_sum();
                        let sum_dx = dxhat.component_mul(xhat).row_sum();
                        DMatrix::from_fn(dz.nrows(), dz.ncols(), |i, j| {
                            istd[j] / m * (m * dxhat[(i, j)] - sum_d[j] - xhat[(i, j)] * sum_dx[j])
                        })
                    }
                };
                bn_grad = Some((dscale, dshift));
            }
            let dw = cache.input.transpose() * &dz;
            let db = dz.row_sum();
            let dinput = &dz * layer.w.transpose();
            grads.push(LayerGrads {
                w: dw,
                b: db,
                bn: bn_grad,
            });
            dz = dinput;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, dz))
    }

    /// `self − alpha · g` on trainable parameters; running statistics are kept.
    pub fn step(&self, g: &MlpGrads, alpha: f64) -> MlpParams {
        let mut out = self.clone();
        for (layer, lg) in out.layers.iter_mut().zip(&g.layers) {
            layer.w -= &lg.w * alpha;
            layer.b -= &lg.b * alpha;
            if let (Some(bn), Some((ds, dh))) = (&mut layer.bn, &lg.bn) {
                bn.scale -= ds * alpha;
                bn.shift -= dh * alpha;
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.iter().chain(l.b.iter()).all(|v| v.is_finite())
                && l.bn.as_ref().is_none_or(|bn| {
                    bn.scale
                        .iter()
                        .chain(bn.shift.iter())
                        .chain(bn.running_mean.iter())
                        .chain(bn.running_var.iter())
                        .all(|v| v.is_finite())
                })
        })
    }

    /// Trainable parameters in a fixed order (weights, biases, scale, shift per layer).
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
            if let Some(bn) = &l.bn {
                v.extend(bn.scale.iter());
                v.extend(bn.shift.iter());
            }
        }
        DVector::from_vec(v)
    }

    /// Inverse of [`MlpParams::flatten`].
    pub fn with_flat(&self, flat: &DVector<f64>) -> Result<MlpParams> {
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        let mut take = |buf: &mut dyn Iterator<Item = &mut f64>| -> Result<()> {
            for slot in buf {
                *slot = it.next().ok_or_else(|| Error::invalid("flat parameter vector too short"))?;
            }
            Ok(())
        };
        for l in &mut out.layers {
            take(&mut l.w.iter_mut())?;
            take(&mut l.b.iter_mut())?;
            if let Some(bn) = &mut l.bn {
                take(&mut bn.scale.iter_mut())?;
                take(&mut bn.shift.iter_mut())?;
            }
        }
        if it.next().is_some() {
            return Err(Error::invalid("flat parameter vector too long"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: DMatrix<f64>,
    pub b: RowDVector<f64>,
    /// `(scale, shift)`.
    pub bn: Option<(RowDVector<f64>, RowDVector<f64>)>,
}

/// Gradients shaped like the trainable parts of [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn norm_squared(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.w.norm_squared()
                    + l.b.norm_squared()
                    + l.bn.as_ref().map_or(0.0, |(s, h)| s.norm_squared() + h.norm_squared())
            })
            .sum()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.w.iter());
            v.extend(l.b.iter());
            if let Some((s, h)) = &l.bn {
                v.extend(s.iter());
                v.extend(h.iter());
            }
        }
        DVector::from_vec(v)
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Mean softmax cross-entropy of `probs` against class indices.
pub fn cross_entropy(probs: &DMatrix<f64>, classes: &[usize]) -> f64 {
    let n = classes.len() as f64;
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| -probs[(i, c)].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / n
}
