#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use triaccel::net::{Activation, LayerSpec, Matrix, Network};
use triaccel::precision::LossScale;
use triaccel::PrecisionMode;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Binary format described by exponent width and stored significand width.
#[derive(Debug, Clone, Copy)]
pub struct Format {
    pub exp_bits: u32,
    pub sig_bits: u32,
}

pub const HALF: Format = Format {
    exp_bits: 5,
    sig_bits: 10,
};
pub const BFLOAT: Format = Format {
    exp_bits: 8,
    sig_bits: 7,
};

impl Format {
    pub fn bias(self) -> i64 {
        (1i64 << (self.exp_bits - 1)) - 1
    }

    pub fn emin(self) -> i64 {
        1 - self.bias()
    }

    pub fn of(mode: PrecisionMode) -> Option<Format> {
        match mode {
            PrecisionMode::Fp16 => Some(HALF),
            PrecisionMode::Bf16 => Some(BFLOAT),
            PrecisionMode::Fp32 => None,
        }
    }
}

/// Round-to-nearest-even into `fmt`, done entirely on the integer
/// significand of the f64 encoding.
pub fn oracle_quantize(x: f64, fmt: Format) -> f64 {
    if x.is_nan() || x.is_infinite() || x == 0.0 {
        return x;
    }
    let bits = x.to_bits();
    let negative = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    // |x| = m * 2^e
    let (m, e) = if biased == 0 {
        (frac, -1074i64)
    } else {
        (frac | (1u64 << 52), biased - 1075)
    };
    let top = e + 63 - i64::from(m.leading_zeros());
    let signed = |v: f64| if negative { -v } else { v };
    if top > fmt.bias() {
        return signed(f64::INFINITY);
    }
    let quantum = top.max(fmt.emin()) - i64::from(fmt.sig_bits);
    let shift = quantum - e;
    let units: u64 = if shift <= 0 {
        // exactly representable at this quantum
        m << (-shift)
    } else if shift >= 64 {
        0
    } else {
        let q = m >> shift;
        let rem = m & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q + 1
        } else {
            q
        }
    };
    let max_units = (1u64 << (fmt.sig_bits + 1)) - 1;
    let max_quantum = fmt.bias() - i64::from(fmt.sig_bits);
    // units * 2^quantum against max_units * 2^max_quantum; quantum <= max_quantum
    let d = max_quantum - quantum;
    if d < 64 && units > (max_units << d) {
        return signed(f64::INFINITY);
    }
    signed(units as f64 * 2f64.powi(quantum as i32))
}

/// Random finite f64 whose magnitude straddles the whole range of `fmt`,
/// including subnormals, overflow and exact rounding ties.
pub fn sample_value(rng: &mut impl Rng, fmt: Format) -> f64 {
    let sign = if rng.gen::<bool>() { -1.0 } else { 1.0 };
    match rng.gen_range(0..10) {
        0 => {
            // exact tie between two neighbours
            let exp = rng.gen_range(fmt.emin() - 2..=fmt.bias()) as i32;
            let quantum = exp.max(fmt.emin() as i32) - fmt.sig_bits as i32;
            let lo = rng.gen_range(0u64..(1 << (fmt.sig_bits + 1)));
            sign * (lo as f64 + 0.5) * 2f64.powi(quantum)
        }
        1 => {
            // uniformly random f64 bit pattern
            loop {
                let v = f64::from_bits(rng.gen());
                if v.is_finite() {
                    return v;
                }
            }
        }
        _ => {
            let lo = fmt.emin() - i64::from(fmt.sig_bits) - 3;
            let hi = fmt.bias() + 2;
            let exp = rng.gen_range(lo..=hi);
            let frac: u64 = rng.gen::<u64>() >> 12;
            let v = f64::from_bits(((exp + 1023) as u64) << 52 | frac);
            sign * v
        }
    }
}

pub fn random_specs(rng: &mut impl Rng) -> Vec<LayerSpec> {
    let input = rng.gen_range(2..=5);
    let depth = rng.gen_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=6)).collect();
    let classes = rng.gen_range(2..=4);
    Network::mlp_specs(input, &hidden, classes, Activation::Tanh)
}

pub fn random_batch(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    classes: usize,
) -> (Matrix, Vec<usize>) {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let labels = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    (Matrix::from_vec(rows, cols, data).unwrap(), labels)
}

pub fn full_width_grads(net: &Network, batch: &Matrix, labels: &[usize]) -> Vec<Vec<f64>> {
    net.loss_and_grads(batch, labels, &net.full_precision(), LossScale::NONE)
        .unwrap()
        .grads
        .iter()
        .map(|g| g.flat())
        .collect()
}

fn with_layer_params(net: &Network, layer: usize, params: &[f64]) -> Network {
    let mut n = net.clone();
    n.layers_mut()[layer].set_flat_params(params).unwrap();
    n
}

/// Central finite-difference gradient of the mean loss w.r.t. one layer.
pub fn fd_gradient(
    net: &Network,
    layer: usize,
    batch: &Matrix,
    labels: &[usize],
    h: f64,
) -> Vec<f64> {
    let base = net.layers()[layer].flat_params();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = with_layer_params(net, layer, &p)
                .loss(batch, labels)
                .unwrap();
            p[i] = base[i] - h;
            let down = with_layer_params(net, layer, &p)
                .loss(batch, labels)
                .unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite difference of the analytic gradient along `v` within one layer.
pub fn fd_hvp(
    net: &Network,
    layer: usize,
    batch: &Matrix,
    labels: &[usize],
    v: &[f64],
    h: f64,
) -> Vec<f64> {
    let base = net.layers()[layer].flat_params();
    let shifted = |s: f64| {
        let p: Vec<f64> = base.iter().zip(v).map(|(b, vi)| b + s * vi).collect();
        full_width_grads(&with_layer_params(net, layer, &p), batch, labels)[layer].clone()
    };
    let up = shifted(h);
    let down = shifted(-h);
    up.iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect()
}

pub fn rel_error(a: &[f64], reference: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = reference.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Random symmetric matrix Q diag(lambda) Q^T with Q from a QR
/// factorization. The five largest magnitudes are separated from each other
/// and from the rest of the spectrum by at least `gap`.
pub fn symmetric_with_gap(rng: &mut impl Rng, dim: usize, gap: f64) -> (DMatrix<f64>, Vec<f64>) {
    assert!(dim >= 5);
    let tail_max = 1.0;
    let mut mags: Vec<f64> = Vec::with_capacity(dim);
    let mut level = tail_max + gap + rng.gen_range(0.0..1.0);
    for _ in 0..5 {
        mags.push(level);
        level += gap + rng.gen_range(0.0..2.0);
    }
    for _ in 5..dim {
        mags.push(rng.gen_range(0.0..tail_max));
    }
    let lambdas: Vec<f64> = mags
        .into_iter()
        .map(|m| if rng.gen::<bool>() { m } else { -m })
        .collect();
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(lambdas.clone())) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    (a, lambdas)
}

/// Top-k eigenvalues by magnitude from a dense symmetric solver.
pub fn dense_top_k(a: &DMatrix<f64>, k: usize) -> Vec<f64> {
    let eig = a.clone().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| y.abs().total_cmp(&x.abs()));
    vals.truncate(k);
    vals
}

pub fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    (0..n * n).map(|i| a[(i / n, i % n)]).collect()
}
