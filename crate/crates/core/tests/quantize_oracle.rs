mod common;

use common::{oracle_quantize, sample_value, Format, BFLOAT, HALF};
use proptest::prelude::*;
use rand::Rng;
use triaccel::{quantize, PrecisionMode};

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

#[test]
fn matches_integer_oracle() {
    for (mode, fmt, seed) in [
        (PrecisionMode::Fp16, HALF, 11),
        (PrecisionMode::Bf16, BFLOAT, 12),
    ] {
        let mut rng = common::rng(seed);
        for _ in 0..100_000 {
            let x = sample_value(&mut rng, fmt);
            let got = quantize(x, mode);
            let want = oracle_quantize(x, fmt);
            assert!(same(got, want), "{mode}: x={x:e} got {got:e} want {want:e}");
        }
    }
}

// half's f32 conversions are correctly rounded, so on f32 inputs it is a
// third, unrelated implementation.
#[test]
fn oracle_and_quantizer_agree_with_half_on_f32_inputs() {
    let mut rng = common::rng(13);
    for _ in 0..100_000 {
        let x = loop {
            let v = f32::from_bits(rng.gen());
            if v.is_finite() {
                break v;
            }
        };
        let h = f64::from(half::f16::from_f32(x));
        let b = f64::from(half::bf16::from_f32(x));
        let xd = f64::from(x);
        assert!(same(quantize(xd, PrecisionMode::Fp16), h), "fp16 {x:e}");
        assert!(same(oracle_quantize(xd, HALF), h), "oracle fp16 {x:e}");
        assert!(same(quantize(xd, PrecisionMode::Bf16), b), "bf16 {x:e}");
        assert!(same(oracle_quantize(xd, BFLOAT), b), "oracle bf16 {x:e}");
    }
}

#[test]
fn reference_points() {
    let h = |x: f64| quantize(x, PrecisionMode::Fp16);
    let b = |x: f64| quantize(x, PrecisionMode::Bf16);
    assert_eq!(h(65504.0), 65504.0);
    assert_eq!(h(65519.0), 65504.0);
    // halfway to 65536 rounds to even, which overflows
    assert_eq!(h(65520.0), f64::INFINITY);
    assert_eq!(h(-1e6), f64::NEG_INFINITY);
    assert_eq!(h(2f64.powi(-24)), 2f64.powi(-24));
    assert_eq!(h(2f64.powi(-25)), 0.0);
    assert_eq!(h(3.0 * 2f64.powi(-26)), 2f64.powi(-24));
    assert_eq!(h(1.0 + 2f64.powi(-11)), 1.0);
    assert_eq!(h(1.0 + 3.0 * 2f64.powi(-11)), 1.0 + 2f64.powi(-9));
    assert_eq!(h(0.1), 0.0999755859375);
    assert_eq!(b(1.0 + 2f64.powi(-8)), 1.0);
    assert_eq!(b(1.0 + 3.0 * 2f64.powi(-8)), 1.0 + 2f64.powi(-6));
    assert_eq!(b(0.1), 0.10009765625);
    assert_eq!(b(1e39), f64::INFINITY);
    assert_eq!(b(2f64.powi(-133)), 2f64.powi(-133));
    assert_eq!(b(2f64.powi(-134)), 0.0);
    assert_eq!(h(-0.0).to_bits(), (-0.0f64).to_bits());
    assert!(h(f64::NAN).is_nan());
    assert_eq!(quantize(0.1, PrecisionMode::Fp32), 0.1);
}

fn value(fmt: Format) -> impl Strategy<Value = f64> {
    any::<u64>().prop_map(move |s| sample_value(&mut common::rng(s), fmt))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5000))]

    #[test]
    fn fuzz_idempotent(x in value(HALF), y in value(BFLOAT)) {
        let qx = quantize(x, PrecisionMode::Fp16);
        prop_assert!(same(quantize(qx, PrecisionMode::Fp16), qx));
        let qy = quantize(y, PrecisionMode::Bf16);
        prop_assert!(same(quantize(qy, PrecisionMode::Bf16), qy));
    }

    #[test]
    fn fuzz_monotone(a in value(HALF), b in value(HALF), c in value(BFLOAT), d in value(BFLOAT)) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo, PrecisionMode::Fp16) <= quantize(hi, PrecisionMode::Fp16));
        let (lo, hi) = if c <= d { (c, d) } else { (d, c) };
        prop_assert!(quantize(lo, PrecisionMode::Bf16) <= quantize(hi, PrecisionMode::Bf16));
    }

    #[test]
    fn fuzz_sign_symmetric(x in value(HALF), y in value(BFLOAT)) {
        prop_assert!(same(quantize(-x, PrecisionMode::Fp16), -quantize(x, PrecisionMode::Fp16)));
        prop_assert!(same(quantize(-y, PrecisionMode::Bf16), -quantize(y, PrecisionMode::Bf16)));
    }
}
