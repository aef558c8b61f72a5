//! Fully-connected softmax classifier with explicit forward and backward
//! passes.
//!
//! Each layer runs in its own [`PrecisionMode`]: the layer's weights, inputs,
//! pre-activations and outputs are rounded to that mode, and in the backward
//! pass its incoming gradients and parameter gradients are rounded too (with
//! a static loss scale for FP16). Master parameters stay at full width.

pub mod hvp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::{quantize, quantize_in_place, LossScale, PrecisionMode};

pub use hvp::{DenseOperator, HvpOperator, LayerHessian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative. ReLU uses the almost-everywhere value 0 at its kink.
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Row-major matrix; rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// One dense layer: `y = act(W x + b)` with `W` stored `out_dim x in_dim`
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Parameters flattened as weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let nw = self.weights.len();
        self.weights.copy_from_slice(&params[..nw]);
        self.bias.copy_from_slice(&params[nw..]);
        Ok(())
    }
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

/// Per-layer values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer input as seen by the layer (rounded to its mode).
    pub input: Matrix,
    /// Weights as used in the affine transform (rounded to its mode).
    pub weights: Vec<f64>,
    /// Pre-activation `W x + b`, rounded.
    pub pre: Matrix,
    /// Activation output, rounded.
    pub out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub precisions: Vec<PrecisionMode>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self
            .layers
            .last()
            .expect("network has at least one layer")
            .out
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: Vec<LayerGrad>,
    /// Loss or some gradient entry is NaN/inf. Not an error: the control
    /// loop decides how to recover.
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
}

impl Network {
    /// Builds a network with all-zero parameters.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| Dense {
                spec,
                weights: vec![0.0; spec.in_dim * spec.out_dim],
                bias: vec![0.0; spec.out_dim],
            })
            .collect();
        Ok(Network { layers })
    }

    /// Glorot-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Network::zeros(specs)?;
        for layer in &mut net.layers {
            let std = (2.0 / (layer.spec.in_dim + layer.spec.out_dim) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weights {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Hidden layers of `hidden` widths using `activation`, then an identity
    /// output layer producing logits.
    pub fn mlp_specs(
        input: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            specs.push(LayerSpec::new(prev, h, activation));
            prev = h;
        }
        specs.push(LayerSpec::new(prev, classes, Activation::Identity));
        specs
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_precisions(&self, precisions: &[PrecisionMode]) -> Result<()> {
        if precisions.len() != self.layers.len() {
            return Err(Error::config(format!(
                "precision map covers {} layers, network has {}",
                precisions.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix, precisions: &[PrecisionMode]) -> Result<ForwardCache> {
        self.check_precisions(precisions)?;
        if batch.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "batch width {} does not match input dimension {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for (l, (layer, &mode)) in self.layers.iter().zip(precisions).enumerate() {
            let spec = layer.spec;
            let mut input = match l {
                0 => batch.clone(),
                _ => caches[l - 1].out.clone(),
            };
            quantize_in_place(input.as_mut_slice(), mode);
            let mut weights = layer.weights.clone();
            quantize_in_place(&mut weights, mode);
            let mut bias = layer.bias.clone();
            quantize_in_place(&mut bias, mode);

            let mut pre = Matrix::zeros(n, spec.out_dim);
            let mut out = Matrix::zeros(n, spec.out_dim);
            for r in 0..n {
                let x = input.row(r);
                let z_row = pre.row_mut(r);
                for (o, z) in z_row.iter_mut().enumerate() {
                    let w = &weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                    let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    *z = quantize(s + bias[o], mode);
                }
                for (a, &z) in out.row_mut(r).iter_mut().zip(pre.row(r)) {
                    *a = quantize(spec.activation.apply(z), mode);
                }
            }
            caches.push(LayerCache {
                input,
                weights,
                pre,
                out,
            });
        }
        Ok(ForwardCache {
            layers: caches,
            precisions: precisions.to_vec(),
        })
    }

    /// Mean softmax cross-entropy and per-layer gradients.
    ///
    /// `precisions` governs rounding of the backward pass; it is normally the
    /// map the cache was built with. FP16 layers round `scale * g` and divide
    /// the scale back out.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        labels: &[usize],
        precisions: &[PrecisionMode],
        loss_scale: LossScale,
    ) -> Result<Backward> {
        self.check_precisions(precisions)?;
        if cache.layers.len() != self.layers.len() {
            return Err(Error::config(
                "forward cache does not belong to this network",
            ));
        }
        let logits = cache.logits();
        let n = logits.rows();
        if labels.len() != n || n == 0 {
            return Err(Error::config(format!(
                "{} labels for a batch of {n} samples",
                labels.len()
            )));
        }
        let classes = self.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }

        let (loss, mut upstream) = softmax_cross_entropy(logits, labels);
        let mut non_finite = !loss.is_finite();
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());

        for l in (0..self.layers.len()).rev() {
            let spec = self.layers[l].spec;
            let mode = precisions[l];
            let scale = loss_scale.for_mode(mode);
            let lc = &cache.layers[l];

            // dL/dz, scaled and rounded
            let mut delta = Matrix::zeros(n, spec.out_dim);
            for r in 0..n {
                let g = upstream.row(r);
                let z = lc.pre.row(r);
                for ((d, &gi), &zi) in delta.row_mut(r).iter_mut().zip(g).zip(z) {
                    *d = quantize(scale * gi * spec.activation.derivative(zi), mode);
                }
            }

            let mut gw = vec![0.0; spec.in_dim * spec.out_dim];
            let mut gb = vec![0.0; spec.out_dim];
            for r in 0..n {
                let d = delta.row(r);
                let x = lc.input.row(r);
                for (o, &dv) in d.iter().enumerate() {
                    gb[o] += dv;
                    let row = &mut gw[o * spec.in_dim..(o + 1) * spec.in_dim];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        *g += dv * xv;
                    }
                }
            }
            for g in gw.iter_mut().chain(gb.iter_mut()) {
                *g = quantize(*g, mode) / scale;
            }

            if l > 0 {
                let mut next = Matrix::zeros(n, spec.in_dim);
                for r in 0..n {
                    let d = delta.row(r);
                    let out = next.row_mut(r);
                    for (o, &dv) in d.iter().enumerate() {
                        let w = &lc.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                        for (acc, &wv) in out.iter_mut().zip(w) {
                            *acc += wv * dv;
                        }
                    }
                    for v in out.iter_mut() {
                        *v = quantize(*v, mode) / scale;
                    }
                }
                upstream = next;
            }

            non_finite |= gw.iter().chain(&gb).any(|g| !g.is_finite());
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(Backward {
            loss,
            grads,
            non_finite,
        })
    }

    /// Forward then backward under one precision map.
    pub fn loss_and_grads(
        &self,
        batch: &Matrix,
        labels: &[usize],
        precisions: &[PrecisionMode],
        loss_scale: LossScale,
    ) -> Result<Backward> {
        let cache = self.forward(batch, precisions)?;
        self.backward(&cache, labels, precisions, loss_scale)
    }

    /// Full-width mean loss.
    pub fn loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let cache = self.forward(batch, &self.full_precision())?;
        Ok(softmax_cross_entropy(cache.logits(), labels).0)
    }

    /// Percentage of rows whose arg-max logit equals the label, full width.
    pub fn accuracy(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        let cache = self.forward(inputs, &self.full_precision())?;
        let logits = cache.logits();
        let correct = (0..logits.rows())
            .filter(|&r| argmax(logits.row(r)) == labels[r])
            .count();
        Ok(100.0 * correct as f64 / logits.rows().max(1) as f64)
    }

    pub fn full_precision(&self) -> Vec<PrecisionMode> {
        vec![PrecisionMode::Fp32; self.layers.len()]
    }

    /// Layer-restricted Hessian of the full-width mean loss on `batch`.
    pub fn layer_hessian<'a>(
        &'a self,
        layer: usize,
        batch: &'a Matrix,
        labels: &'a [usize],
    ) -> Result<LayerHessian<'a>> {
        LayerHessian::new(self, layer, batch, labels)
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("network needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::config(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::config(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].out_dim,
                i + 1,
                pair[1].in_dim
            )));
        }
    }
    Ok(())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax probabilities.
pub(crate) fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_n;
        }
    }
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use PrecisionMode::*;

    fn random_batch(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        classes: usize,
    ) -> (Matrix, Vec<usize>) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data = (0..n * d).map(|_| normal.sample(rng)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        (Matrix::from_vec(n, d, data).unwrap(), labels)
    }

    #[test]
    fn identity_network_passes_input_through() {
        let mut net = Network::zeros(&[LayerSpec::new(3, 3, Activation::Identity)]).unwrap();
        let w = &mut net.layers_mut()[0].weights;
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Matrix::from_vec(1, 3, vec![0.5, -2.0, 7.0]).unwrap();
        let cache = net.forward(&x, &[Fp32]).unwrap();
        assert_eq!(cache.logits().as_slice(), x.as_slice());

        let big = Matrix::from_vec(1, 3, vec![70000.0, 1.0, 0.0]).unwrap();
        let cache = net.forward(&big, &[Fp16]).unwrap();
        assert_eq!(cache.logits().row(0)[0], f64::INFINITY);
        let bw = net
            .backward(&cache, &[1], &[Fp16], LossScale::DEFAULT)
            .unwrap();
        assert!(bw.non_finite);
    }

    #[test]
    fn symmetric_batch_gives_zero_bias_gradient() {
        let net = Network::zeros(&[LayerSpec::new(2, 2, Activation::Identity)]).unwrap();
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.5, -1.0, -0.5]).unwrap();
        let bw = net
            .loss_and_grads(&x, &[0, 1], &[Fp32], LossScale::NONE)
            .unwrap();
        assert_eq!(bw.grads[0].bias, vec![0.0, 0.0]);
        assert!((bw.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        assert!(Network::zeros(&[
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 2, Activation::Identity)
        ])
        .is_err());
        assert!(Network::zeros(&[LayerSpec::new(0, 3, Activation::Relu)]).is_err());
        let net = Network::zeros(&[LayerSpec::new(2, 2, Activation::Identity)]).unwrap();
        let x = Matrix::zeros(1, 3);
        assert!(net.forward(&x, &[Fp32]).is_err());
        assert!(net.forward(&Matrix::zeros(1, 2), &[Fp32, Fp32]).is_err());
        let cache = net.forward(&Matrix::zeros(1, 2), &[Fp32]).unwrap();
        assert!(net
            .backward(&cache, &[5], &[Fp32], LossScale::NONE)
            .is_err());
        assert!(net
            .backward(&cache, &[0, 1], &[Fp32], LossScale::NONE)
            .is_err());
    }

    #[test]
    fn fp32_path_is_deterministic() {
        let specs = Network::mlp_specs(4, &[6, 5], 3, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(&specs, &mut rng).unwrap();
        let (x, y) = random_batch(&mut rng, 7, 4, 3);
        let a = net
            .loss_and_grads(&x, &y, &net.full_precision(), LossScale::NONE)
            .unwrap();
        let b = net
            .loss_and_grads(&x, &y, &net.full_precision(), LossScale::DEFAULT)
            .unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn param_round_trip_and_hash() {
        let specs = Network::mlp_specs(3, &[4], 2, Activation::Relu);
        let mut net = Network::init(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let h = net.param_hash();
        let flat = net.layers()[1].flat_params();
        net.layers_mut()[1].set_flat_params(&flat).unwrap();
        assert_eq!(h, net.param_hash());
        let mut bumped = flat.clone();
        bumped[0] += 1e-12;
        net.layers_mut()[1].set_flat_params(&bumped).unwrap();
        assert_ne!(h, net.param_hash());
        assert!(net.layers_mut()[1].set_flat_params(&flat[1..]).is_err());
        assert_eq!(net.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }
}
