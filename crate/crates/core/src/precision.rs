//! Software emulation of FP16 and BF16 rounding.
//!
//! Values are carried at `f64` width everywhere; "computing a layer in FP16"
//! means rounding every value that layer touches to the nearest FP16 number
//! (round-to-nearest-even, gradual underflow through subnormals, overflow to
//! signed infinity). The results are bit-reproducible on any host.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Compute precision of a layer.
///
/// The derived ordering is the stability rank used by promotion logic:
/// `Fp16 < Bf16 < Fp32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    Fp16,
    Bf16,
    Fp32,
}

impl PrecisionMode {
    pub const ALL: [PrecisionMode; 3] = [
        PrecisionMode::Fp16,
        PrecisionMode::Bf16,
        PrecisionMode::Fp32,
    ];

    /// Rounding parameters, or `None` for the full-width identity mode.
    pub fn quant_spec(self) -> Option<QuantSpec> {
        match self {
            PrecisionMode::Fp16 => Some(QuantSpec::FP16),
            PrecisionMode::Bf16 => Some(QuantSpec::BF16),
            PrecisionMode::Fp32 => None,
        }
    }

    /// Storage width of one value, used by the memory model.
    pub fn bytes_per_value(self) -> u64 {
        match self {
            PrecisionMode::Fp16 | PrecisionMode::Bf16 => 2,
            PrecisionMode::Fp32 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrecisionMode::Fp16 => "fp16",
            PrecisionMode::Bf16 => "bf16",
            PrecisionMode::Fp32 => "fp32",
        }
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(PrecisionMode::Fp16),
            "bf16" => Ok(PrecisionMode::Bf16),
            "fp32" => Ok(PrecisionMode::Fp32),
            other => Err(Error::config(format!("unknown precision mode `{other}`"))),
        }
    }
}

/// Binary interchange format description: exponent width and stored
/// significand width (implicit leading bit excluded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub exponent_bits: u32,
    pub significand_bits: u32,
    pub max_finite: f64,
}

impl QuantSpec {
    pub const FP16: QuantSpec = QuantSpec {
        exponent_bits: 5,
        significand_bits: 10,
        max_finite: 65504.0,
    };

    pub const BF16: QuantSpec = QuantSpec {
        exponent_bits: 8,
        significand_bits: 7,
        // (2 - 2^-7) * 2^127
        max_finite: 3.389_531_389_251_535_5e38,
    };

    /// Largest unbiased exponent of a finite value.
    pub fn max_exponent(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    /// Exponent of the smallest normal value.
    pub fn min_exponent(&self) -> i32 {
        1 - self.max_exponent()
    }

    /// Rounds `x` to the nearest representable value, ties to even.
    pub fn quantize(&self, x: f64) -> f64 {
        if !x.is_finite() || x == 0.0 {
            return x;
        }
        let a = x.abs();
        // f64 subnormals sit far below either format's smallest subnormal.
        let exp = if a < f64::MIN_POSITIVE {
            self.min_exponent()
        } else {
            ((a.to_bits() >> 52) as i32) - 1023
        };
        if exp > self.max_exponent() {
            return f64::INFINITY.copysign(x);
        }
        let ulp_exp = exp.max(self.min_exponent()) - self.significand_bits as i32;
        // Power-of-two scaling is exact, so the only rounding is the integer one.
        let units = (a * pow2(-ulp_exp)).round_ties_even();
        let r = units * pow2(ulp_exp);
        if r > self.max_finite {
            f64::INFINITY.copysign(x)
        } else {
            r.copysign(x)
        }
    }
}

/// 2^k for k in the normal f64 exponent range.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Rounds `x` to `mode`. FP32 mode is the identity (NaN payloads included).
pub fn quantize(x: f64, mode: PrecisionMode) -> f64 {
    match mode.quant_spec() {
        Some(spec) => spec.quantize(x),
        None => x,
    }
}

pub fn quantize_buffer(xs: &[f64], mode: PrecisionMode) -> Vec<f64> {
    xs.iter().map(|&x| quantize(x, mode)).collect()
}

pub fn quantize_in_place(xs: &mut [f64], mode: PrecisionMode) {
    if let Some(spec) = mode.quant_spec() {
        for x in xs {
            *x = spec.quantize(*x);
        }
    }
}

/// Static loss scale applied to gradients computed in FP16.
///
/// Gradients are multiplied by the scale before FP16 rounding and divided by
/// it afterwards, keeping small values out of the subnormal range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossScale(f64);

impl LossScale {
    pub const DEFAULT: LossScale = LossScale(1024.0);
    pub const NONE: LossScale = LossScale(1.0);

    pub fn new(scale: f64) -> Result<Self, Error> {
        if scale.is_finite() && scale > 0.0 {
            Ok(LossScale(scale))
        } else {
            Err(Error::config(format!(
                "loss scale must be positive and finite, got {scale}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Scale factor used for a layer running in `mode`.
    pub fn for_mode(self, mode: PrecisionMode) -> f64 {
        match mode {
            PrecisionMode::Fp16 => self.0,
            _ => 1.0,
        }
    }

    pub fn halved(self) -> LossScale {
        LossScale((self.0 * 0.5).max(1.0))
    }
}

impl Default for LossScale {
    fn default() -> Self {
        LossScale::DEFAULT
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use PrecisionMode::*;

    fn bits_eq(a: f64, b: f64) -> bool {
        a.to_bits() == b.to_bits()
    }

    #[test]
    fn documented_values() {
        assert_eq!(quantize(1.0, Bf16), 1.0);
        assert_eq!(quantize(70000.0, Fp16), f64::INFINITY);
        assert_eq!(quantize(-70000.0, Fp16), f64::NEG_INFINITY);
        // 2^-9 is below half an ulp (2^-8) of BF16 at 1.0
        assert_eq!(quantize(1.0 + 2f64.powi(-9), Bf16), 1.0);
        assert_eq!(quantize(65504.0, Fp16), 65504.0);
        // 65520 is the exact midpoint to the next (overflowing) value; ties to even -> inf
        assert_eq!(quantize(65519.99, Fp16), 65504.0);
        assert_eq!(quantize(65520.0, Fp16), f64::INFINITY);
    }

    #[test]
    fn max_finite_matches_layout() {
        for spec in [QuantSpec::FP16, QuantSpec::BF16] {
            let p = spec.significand_bits as i32;
            let expected = (2.0 - 2f64.powi(-p)) * 2f64.powi(spec.max_exponent());
            assert_eq!(spec.max_finite, expected);
        }
    }

    #[test]
    fn subnormals_and_underflow() {
        let min_sub = 2f64.powi(-24);
        assert_eq!(quantize(min_sub, Fp16), min_sub);
        assert_eq!(quantize(3.0 * min_sub, Fp16), 3.0 * min_sub);
        // half of the smallest subnormal ties to even (zero)
        assert!(bits_eq(quantize(0.5 * min_sub, Fp16), 0.0));
        assert!(bits_eq(quantize(-0.5 * min_sub, Fp16), -0.0));
        assert_eq!(quantize(0.75 * min_sub, Fp16), min_sub);
        assert_eq!(quantize(2f64.powi(-133), Bf16), 2f64.powi(-133));
        assert!(bits_eq(quantize(-1e-300, Bf16), -0.0));
        assert!(bits_eq(quantize(f64::MIN_POSITIVE / 4.0, Fp16), 0.0));
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-11 is halfway between 1 and 1 + 2^-10 in FP16
        assert_eq!(quantize(1.0 + 2f64.powi(-11), Fp16), 1.0);
        let odd = 1.0 + 2f64.powi(-10);
        assert_eq!(quantize(odd + 2f64.powi(-11), Fp16), 1.0 + 2f64.powi(-9));
    }

    #[test]
    fn non_finite_passthrough() {
        for mode in PrecisionMode::ALL {
            assert!(quantize(f64::NAN, mode).is_nan());
            assert_eq!(quantize(f64::INFINITY, mode), f64::INFINITY);
            assert_eq!(quantize(f64::NEG_INFINITY, mode), f64::NEG_INFINITY);
        }
        let payload = f64::from_bits(0x7ff8_0000_dead_beef);
        assert!(bits_eq(quantize(payload, Fp32), payload));
    }

    #[test]
    fn buffer_examples() {
        assert_eq!(
            quantize_buffer(&[1.0, 70000.0], Fp16),
            vec![1.0, f64::INFINITY]
        );
        assert!(quantize_buffer(&[], Fp32).is_empty());
    }

    #[test]
    fn mode_order_and_parse() {
        assert!(Fp16 < Bf16 && Bf16 < Fp32);
        for m in PrecisionMode::ALL {
            assert_eq!(m.to_string().parse::<PrecisionMode>().unwrap(), m);
        }
        assert!("fp8".parse::<PrecisionMode>().is_err());
    }

    #[test]
    fn loss_scale_rules() {
        assert_eq!(LossScale::DEFAULT.get(), 1024.0);
        assert_eq!(LossScale::DEFAULT.for_mode(Bf16), 1.0);
        assert_eq!(LossScale::DEFAULT.halved().get(), 512.0);
        assert_eq!(LossScale::NONE.halved().get(), 1.0);
        assert!(LossScale::new(0.0).is_err());
    }

    fn any_mode() -> impl Strategy<Value = PrecisionMode> {
        prop_oneof![Just(Fp16), Just(Bf16), Just(Fp32)]
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            (-1.0e6f64..1.0e6),
            (-40i32..20, -1.0f64..1.0).prop_map(|(e, m)| m * 2f64.powi(e)),
            any::<f64>().prop_filter("finite", |x| x.is_finite()),
        ]
    }

    proptest! {
        #[test]
        fn idempotent(x in finite(), m in any_mode()) {
            let q = quantize(x, m);
            prop_assert!(bits_eq(quantize(q, m), q));
        }

        #[test]
        fn monotone(a in finite(), b in finite(), m in any_mode()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, m) <= quantize(hi, m));
        }

        #[test]
        fn sign_symmetric(x in finite(), m in any_mode()) {
            prop_assert!(bits_eq(quantize(-x, m), -quantize(x, m)));
        }

        #[test]
        fn fp32_is_identity(x in any::<f64>()) {
            prop_assert!(bits_eq(quantize(x, Fp32), x));
        }
    }
}
