//! Top-k Hessian eigenvalues by power iteration with deflation.
//!
//! Each eigenpair is found by iterating `u <- H u / |H u|` from a seeded
//! random start and reading the signed Rayleigh quotient `u'Hu / u'u`.
//! Later eigenpairs iterate the deflated operator `H - sum(lambda_i u_i u_i')`
//! with the iterate re-orthogonalized against the vectors already found.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::HvpOperator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurvatureConfig {
    /// Number of eigenvalues per layer.
    pub k: usize,
    /// Training steps between probes.
    pub period_steps: u64,
    /// Minibatch size used for the probe.
    pub probe_batch: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            k: 5,
            period_steps: 200,
            probe_batch: 32,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl CurvatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.period_steps == 0 || self.probe_batch == 0 || self.max_iters == 0 {
            return Err(Error::config(
                "curvature k, period_steps, probe_batch and max_iters must be >= 1",
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("curvature tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub layer: usize,
    /// Signed estimates, ordered by descending magnitude.
    pub eigenvalues: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Training step the probe ran at.
    pub step: u64,
}

impl CurvatureEstimate {
    /// Largest signed eigenvalue among the estimates.
    pub fn max_signed(&self) -> Result<f64> {
        max_signed(self)
    }
}

pub fn max_signed(estimate: &CurvatureEstimate) -> Result<f64> {
    estimate
        .eigenvalues
        .iter()
        .cloned()
        .reduce(f64::max)
        .ok_or_else(|| Error::Argument("empty curvature estimate".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn random_unit(dim: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Removes the components of `v` along each (unit) vector in `basis`.
fn orthogonalize(v: &mut [f64], basis: &[(f64, Vec<f64>)]) {
    for (_, u) in basis {
        let c = dot(v, u);
        for (x, ui) in v.iter_mut().zip(u) {
            *x -= c * ui;
        }
    }
}

fn deflated_apply<O: HvpOperator + ?Sized>(
    op: &O,
    found: &[(f64, Vec<f64>)],
    v: &[f64],
) -> Result<Vec<f64>> {
    let mut w = op.apply(v)?;
    for (lambda, u) in found {
        let c = lambda * dot(u, v);
        for (x, ui) in w.iter_mut().zip(u) {
            *x -= c * ui;
        }
    }
    Ok(w)
}

fn iterate<O: HvpOperator + ?Sized>(
    op: &O,
    found: &[(f64, Vec<f64>)],
    cfg: &CurvatureConfig,
    stream: u64,
) -> Result<PowerIteration> {
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::config("operator dimension must be >= 1"));
    }
    let mut u = random_unit(dim, cfg.seed, stream);
    orthogonalize(&mut u, found);
    let un = norm(&u);
    if un == 0.0 {
        // start vector lies in the span already found
        return Ok(PowerIteration {
            eigenvalue: 0.0,
            eigenvector: u,
            iterations: 0,
            converged: true,
        });
    }
    u.iter_mut().for_each(|x| *x /= un);

    let mut prev: Option<f64> = None;
    let mut lambda = 0.0;
    for it in 1..=cfg.max_iters {
        let mut w = deflated_apply(op, found, &u)?;
        orthogonalize(&mut w, found);
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(PowerIteration {
                eigenvalue: 0.0,
                eigenvector: u,
                iterations: it,
                converged: true,
            });
        }
        lambda = dot(&u, &w) / dot(&u, &u);
        let scale = cfg.tol * lambda.abs().max(1.0);
        let residual = w
            .iter()
            .zip(&u)
            .map(|(wi, ui)| (wi - lambda * ui).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = prev.is_some_and(|p| (lambda - p).abs() < scale);
        if residual < scale || settled {
            return Ok(PowerIteration {
                eigenvalue: lambda,
                eigenvector: u,
                iterations: it,
                converged: true,
            });
        }
        prev = Some(lambda);
        u = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(PowerIteration {
        eigenvalue: lambda,
        eigenvector: u,
        iterations: cfg.max_iters,
        converged: false,
    })
}

/// Dominant (largest-magnitude) eigenpair of `op`.
pub fn power_iterate<O: HvpOperator + ?Sized>(
    op: &O,
    cfg: &CurvatureConfig,
) -> Result<PowerIteration> {
    cfg.validate()?;
    iterate(op, &[], cfg, 0)
}

/// `cfg.k` eigenvalue estimates of `op`, by descending magnitude.
pub fn top_k<O: HvpOperator + ?Sized>(
    op: &O,
    cfg: &CurvatureConfig,
    layer: usize,
    step: u64,
) -> Result<CurvatureEstimate> {
    cfg.validate()?;
    if cfg.k > op.dim() {
        return Err(Error::config(format!(
            "requested {} eigenvalues from a {}-dimensional operator",
            cfg.k,
            op.dim()
        )));
    }
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(cfg.k);
    let mut diag: Vec<(usize, bool)> = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let p = iterate(op, &found, cfg, i as u64)?;
        diag.push((p.iterations, p.converged));
        found.push((p.eigenvalue, p.eigenvector));
    }
    let mut order: Vec<usize> = (0..cfg.k).collect();
    order.sort_by(|&a, &b| found[b].0.abs().total_cmp(&found[a].0.abs()));
    Ok(CurvatureEstimate {
        layer,
        eigenvalues: order.iter().map(|&i| found[i].0).collect(),
        iterations: order.iter().map(|&i| diag[i].0).collect(),
        converged: order.iter().map(|&i| diag[i].1).collect(),
        step,
    })
}
