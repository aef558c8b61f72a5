//! Hessian-vector products restricted to one layer's parameters.
//!
//! [`LayerHessian`] applies the diagonal block `H_l` of the loss Hessian
//! (parameters of layer `l` only) to a direction using the R-operator
//! (forward-mode perturbation of the forward pass followed by the
//! differentiated backward pass). Always full width.

use crate::error::{Error, Result};

use super::{softmax, Matrix, Network};

/// A symmetric linear operator `v -> H v`.
pub trait HvpOperator {
    fn dim(&self) -> usize;

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl<T: HvpOperator + ?Sized> HvpOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(v)
    }
}

fn check_direction(dim: usize, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config("HVP direction is empty"));
    }
    if v.len() != dim {
        return Err(Error::config(format!(
            "HVP direction has {} entries, operator dimension is {dim}",
            v.len()
        )));
    }
    Ok(())
}

/// Explicit symmetric matrix, row-major. Used for quadratic surrogates and
/// as a reference operator in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    n: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::config(format!(
                "dense operator needs {n}x{n} entries"
            )));
        }
        Ok(DenseOperator { n, data })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        DenseOperator::new(n, data)
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }
}

impl HvpOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_direction(self.n, v)?;
        Ok(self
            .data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// `H_l`: Hessian of the mean cross-entropy on a fixed minibatch with respect
/// to layer `l`'s flattened parameters (weights row-major, then bias).
///
/// Borrows the network immutably; probing never touches parameters.
#[derive(Debug)]
pub struct LayerHessian<'a> {
    net: &'a Network,
    layer: usize,
    /// Layer inputs for layers `layer..`.
    inputs: Vec<Matrix>,
    /// Pre-activations for layers `layer..`.
    pre: Vec<Matrix>,
    /// dL/d(output) for layers `layer..`.
    grad_out: Vec<Matrix>,
    probs: Matrix,
}

impl<'a> LayerHessian<'a> {
    pub fn new(net: &'a Network, layer: usize, batch: &Matrix, labels: &[usize]) -> Result<Self> {
        if layer >= net.num_layers() {
            return Err(Error::config(format!(
                "layer {layer} out of range for {} layers",
                net.num_layers()
            )));
        }
        if labels.len() != batch.rows() || labels.is_empty() {
            return Err(Error::config(
                "curvature batch and labels disagree in length",
            ));
        }
        let cache = net.forward(batch, &net.full_precision())?;
        let n = batch.rows();
        let probs = softmax(cache.logits());

        let mut upstream = probs.clone();
        let inv_n = 1.0 / n as f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = upstream.row_mut(r);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= inv_n);
        }
        let count = net.num_layers() - layer;
        let mut grad_out = vec![Matrix::zeros(0, 0); count];
        for j in (layer..net.num_layers()).rev() {
            let spec = net.layers[j].spec;
            let lc = &cache.layers[j];
            grad_out[j - layer] = upstream.clone();
            if j > layer {
                let mut next = Matrix::zeros(n, spec.in_dim);
                for r in 0..n {
                    let g = upstream.row(r);
                    let z = lc.pre.row(r);
                    let out = next.row_mut(r);
                    for o in 0..spec.out_dim {
                        let d = g[o] * spec.activation.derivative(z[o]);
                        let w = &lc.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                        for (acc, &wv) in out.iter_mut().zip(w) {
                            *acc += wv * d;
                        }
                    }
                }
                upstream = next;
            }
        }
        let (inputs, pre) = cache.layers[layer..]
            .iter()
            .map(|c| (c.input.clone(), c.pre.clone()))
            .unzip();
        Ok(LayerHessian {
            net,
            layer,
            inputs,
            pre,
            grad_out,
            probs,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }
}

impl HvpOperator for LayerHessian<'_> {
    fn dim(&self) -> usize {
        self.net.layers[self.layer].param_count()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_direction(self.dim(), v)?;
        let layers = &self.net.layers[self.layer..];
        let n = self.probs.rows();
        let first = layers[0].spec;
        let (vw, vb) = v.split_at(first.in_dim * first.out_dim);

        // R-forward: perturbations of pre-activations and outputs.
        let mut r_pre: Vec<Matrix> = Vec::with_capacity(layers.len());
        let mut r_out = Matrix::zeros(0, 0);
        for (j, layer) in layers.iter().enumerate() {
            let spec = layer.spec;
            let mut rz = Matrix::zeros(n, spec.out_dim);
            for r in 0..n {
                let row = rz.row_mut(r);
                if j == 0 {
                    let x = self.inputs[0].row(r);
                    for (o, acc) in row.iter_mut().enumerate() {
                        let w = &vw[o * spec.in_dim..(o + 1) * spec.in_dim];
                        *acc = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + vb[o];
                    }
                } else {
                    let ra = r_out.row(r);
                    for (o, acc) in row.iter_mut().enumerate() {
                        let w = &layer.weights[o * spec.in_dim..(o + 1) * spec.in_dim];
                        *acc = w.iter().zip(ra).map(|(a, b)| a * b).sum();
                    }
                }
            }
            let mut ra = rz.clone();
            for r in 0..n {
                let z = self.pre[j].row(r);
                for (a, &zi) in ra.row_mut(r).iter_mut().zip(z) {
                    *a *= spec.activation.derivative(zi);
                }
            }
            r_pre.push(rz);
            r_out = ra;
        }

        // R of dL/dlogits: softmax Jacobian applied to the logit perturbation.
        let inv_n = 1.0 / n as f64;
        let mut r_grad_out = Matrix::zeros(n, self.probs.cols());
        for r in 0..n {
            let p = self.probs.row(r);
            let rl = r_out.row(r);
            let dot: f64 = p.iter().zip(rl).map(|(a, b)| a * b).sum();
            for ((g, &pi), &ri) in r_grad_out.row_mut(r).iter_mut().zip(p).zip(rl) {
                *g = pi * (ri - dot) * inv_n;
            }
        }

        // R-backward down to the probed layer.
        let mut j = layers.len() - 1;
        loop {
            let spec = layers[j].spec;
            let mut r_delta = Matrix::zeros(n, spec.out_dim);
            for r in 0..n {
                let z = self.pre[j].row(r);
                let rz = r_pre[j].row(r);
                let g = self.grad_out[j].row(r);
                let rg = r_grad_out.row(r);
                for (o, d) in r_delta.row_mut(r).iter_mut().enumerate() {
                    *d = spec.activation.second_derivative(z[o]) * rz[o] * g[o]
                        + spec.activation.derivative(z[o]) * rg[o];
                }
            }
            if j == 0 {
                let mut hv = vec![0.0; v.len()];
                let (hw, hb) = hv.split_at_mut(spec.in_dim * spec.out_dim);
                for r in 0..n {
                    let d = r_delta.row(r);
                    let x = self.inputs[0].row(r);
                    for (o, &dv) in d.iter().enumerate() {
                        hb[o] += dv;
                        for (h, &xv) in hw[o * spec.in_dim..(o + 1) * spec.in_dim].iter_mut().zip(x)
                        {
                            *h += dv * xv;
                        }
                    }
                }
                return Ok(hv);
            }
            let w = &layers[j].weights;
            let mut next = Matrix::zeros(n, spec.in_dim);
            for r in 0..n {
                let d = r_delta.row(r);
                let out = next.row_mut(r);
                for (o, &dv) in d.iter().enumerate() {
                    for (acc, &wv) in out
                        .iter_mut()
                        .zip(&w[o * spec.in_dim..(o + 1) * spec.in_dim])
                    {
                        *acc += wv * dv;
                    }
                }
            }
            r_grad_out = next;
            j -= 1;
        }
    }
}
