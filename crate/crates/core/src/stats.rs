//! Per-layer EMA of gradient variance.
//!
//! The variance of a step is taken across the elements of the layer's
//! gradient (weights and bias together), so it comes for free with every
//! backward pass.

use crate::error::{Error, Result};

/// Variance of one step's layer gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradVariance {
    Finite(f64),
    /// The gradient contained NaN or infinity.
    NonFinite,
}

impl GradVariance {
    /// Value stored in the tracker; the non-finite marker becomes `+inf`,
    /// which exceeds every finite threshold.
    pub fn as_f64(self) -> f64 {
        match self {
            GradVariance::Finite(v) => v,
            GradVariance::NonFinite => f64::INFINITY,
        }
    }
}

/// Population variance of `grad` (mean squared deviation from the mean).
pub fn instant_variance<'a, I>(grad: I) -> Result<GradVariance>
where
    I: IntoIterator<Item = &'a f64>,
{
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    // Welford
    for &g in grad {
        if !g.is_finite() {
            return Ok(GradVariance::NonFinite);
        }
        n += 1;
        let d = g - mean;
        mean += d / n as f64;
        m2 += d * (g - mean);
    }
    if n == 0 {
        return Err(Error::Argument("variance of an empty gradient".into()));
    }
    Ok(GradVariance::Finite((m2 / n as f64).max(0.0)))
}

/// EMA `v <- beta * v + (1 - beta) * var`, one slot per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTracker {
    beta: f64,
    values: Vec<Option<f64>>,
}

impl VarianceTracker {
    pub fn new(layers: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config(format!(
                "EMA beta must lie in [0, 1), got {beta}"
            )));
        }
        Ok(VarianceTracker {
            beta,
            values: vec![None; layers],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn layers(&self) -> usize {
        self.values.len()
    }

    /// Current EMA, or `None` before the first observation.
    pub fn get(&self, layer: usize) -> Option<f64> {
        self.values.get(layer).copied().flatten()
    }

    /// Folds one observation into the layer's EMA and returns the new value.
    ///
    /// The first observation initializes the EMA directly. A non-finite
    /// observation pins the EMA at `+inf`; the next finite one starts it
    /// afresh.
    pub fn update(&mut self, layer: usize, var: GradVariance) -> Result<f64> {
        let slot = self
            .values
            .get_mut(layer)
            .ok_or_else(|| Error::config(format!("unknown layer {layer}")))?;
        let next = match (*slot, var) {
            (_, GradVariance::NonFinite) => f64::INFINITY,
            (Some(prev), GradVariance::Finite(x)) if prev.is_finite() => {
                if x < 0.0 {
                    return Err(Error::Argument(format!("negative variance {x}")));
                }
                self.beta * prev + (1.0 - self.beta) * x
            }
            (_, GradVariance::Finite(x)) => {
                if x < 0.0 {
                    return Err(Error::Argument(format!("negative variance {x}")));
                }
                x
            }
        };
        *slot = Some(next);
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn var(xs: &[f64]) -> f64 {
        match instant_variance(xs).unwrap() {
            GradVariance::Finite(v) => v,
            GradVariance::NonFinite => panic!("unexpected non-finite"),
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(var(&[1.0, -1.0]), 1.0);
        assert_eq!(var(&[0.3, 0.3, 0.3]), 0.0);
        assert_eq!(
            instant_variance(&[1.0, f64::NAN]).unwrap(),
            GradVariance::NonFinite
        );
        assert!(instant_variance(&[] as &[f64]).is_err());
    }

    #[test]
    fn two_pass_agreement() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mean = xs.iter().sum::<f64>() / 64.0;
        let two_pass = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
        assert!((var(&xs) - two_pass).abs() < 1e-12);
    }

    #[test]
    fn ema_examples() {
        let mut t = VarianceTracker::new(2, 0.9).unwrap();
        assert_eq!(t.update(0, GradVariance::Finite(1.0)).unwrap(), 1.0);
        let v = t.update(0, GradVariance::Finite(2.0)).unwrap();
        assert!((v - 1.1).abs() < 1e-15);

        let mut t0 = VarianceTracker::new(1, 0.0).unwrap();
        t0.update(0, GradVariance::Finite(5.0)).unwrap();
        assert_eq!(t0.update(0, GradVariance::Finite(0.25)).unwrap(), 0.25);

        let mut fixed = VarianceTracker::new(1, 0.9).unwrap();
        for _ in 0..50 {
            assert_eq!(fixed.update(0, GradVariance::Finite(1.0)).unwrap(), 1.0);
        }
    }

    #[test]
    fn sentinel_and_restart() {
        let mut t = VarianceTracker::new(1, 0.9).unwrap();
        t.update(0, GradVariance::Finite(1e-6)).unwrap();
        assert_eq!(t.update(0, GradVariance::NonFinite).unwrap(), f64::INFINITY);
        assert_eq!(t.update(0, GradVariance::Finite(3e-3)).unwrap(), 3e-3);
    }

    #[test]
    fn config_errors() {
        assert!(VarianceTracker::new(1, 1.0).is_err());
        assert!(VarianceTracker::new(1, -0.1).is_err());
        let mut t = VarianceTracker::new(1, 0.5).unwrap();
        assert!(t.update(3, GradVariance::Finite(1.0)).is_err());
        assert!(t.update(0, GradVariance::Finite(-1.0)).is_err());
    }

    proptest! {
        #[test]
        fn ema_stays_within_input_range(
            beta in 0.0f64..0.999,
            xs in prop::collection::vec(0.0f64..1e3, 1..40),
        ) {
            let mut t = VarianceTracker::new(1, beta).unwrap();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(0.0, f64::max);
            for &x in &xs {
                let v = t.update(0, GradVariance::Finite(x)).unwrap();
                prop_assert!(v >= 0.0);
                prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
            }
        }

        #[test]
        fn ema_approaches_constant_monotonically(beta in 0.0f64..0.99, start in 0.0f64..10.0, c in 0.0f64..10.0) {
            let mut t = VarianceTracker::new(1, beta).unwrap();
            t.update(0, GradVariance::Finite(start)).unwrap();
            let mut gap = (start - c).abs();
            for _ in 0..30 {
                let v = t.update(0, GradVariance::Finite(c)).unwrap();
                let g = (v - c).abs();
                prop_assert!(g <= gap + 1e-12);
                gap = g;
            }
        }
    }
}
