//! Efficiency score and memory percentage.

use crate::error::{Error, Result};

/// `accuracy_pct / (time * mem_pct) * 100`.
pub fn efficiency_score(accuracy_pct: f64, time: f64, mem_pct: f64) -> Result<f64> {
    if !(time > 0.0) {
        return Err(Error::Argument(format!(
            "time must be positive, got {time}"
        )));
    }
    if !(mem_pct > 0.0) {
        return Err(Error::Argument(format!(
            "memory percentage must be positive, got {mem_pct}"
        )));
    }
    Ok(accuracy_pct / (time * mem_pct) * 100.0)
}

/// Peak memory as a percentage of `reference_bytes`.
pub fn mem_pct(peak_bytes: f64, reference_bytes: f64) -> Result<f64> {
    if !(reference_bytes > 0.0) {
        return Err(Error::Argument(format!(
            "reference memory must be positive, got {reference_bytes}"
        )));
    }
    Ok(100.0 * peak_bytes / reference_bytes)
}

pub const GB: f64 = 1e9;

/// A published result row: accuracy (%), time (s), VRAM (GB) and the score
/// printed next to them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub dataset: &'static str,
    pub architecture: &'static str,
    pub method: &'static str,
    pub accuracy_pct: f64,
    pub time_s: f64,
    pub vram_gb: f64,
    pub score: f64,
}

const fn row(
    dataset: &'static str,
    architecture: &'static str,
    method: &'static str,
    accuracy_pct: f64,
    time_s: f64,
    vram_gb: f64,
    score: f64,
) -> PublishedRow {
    PublishedRow {
        dataset,
        architecture,
        method,
        accuracy_pct,
        time_s,
        vram_gb,
        score,
    }
}

/// Reference results on CIFAR-10/100 (ResNet-18, EfficientNet-B0) used to
/// sanity-check the score formula.
pub const PUBLISHED_ROWS: [PublishedRow; 12] = [
    row(
        "CIFAR-10",
        "ResNet-18",
        "FP32 Baseline",
        77.0,
        21.0,
        0.35,
        10.48,
    ),
    row(
        "CIFAR-10",
        "ResNet-18",
        "AMP (Static)",
        77.2,
        19.4,
        0.32,
        12.25,
    ),
    row(
        "CIFAR-10",
        "ResNet-18",
        "Tri-Accel",
        78.1,
        19.5,
        0.31,
        12.92,
    ),
    row(
        "CIFAR-10",
        "EfficientNet-B0",
        "FP32 Baseline",
        78.3,
        18.5,
        0.30,
        14.11,
    ),
    row(
        "CIFAR-10",
        "EfficientNet-B0",
        "AMP (Static)",
        78.7,
        17.2,
        0.26,
        17.59,
    ),
    row(
        "CIFAR-10",
        "EfficientNet-B0",
        "Tri-Accel",
        79.4,
        16.8,
        0.26,
        18.17,
    ),
    row(
        "CIFAR-100",
        "ResNet-18",
        "FP32 Baseline",
        68.2,
        24.3,
        0.38,
        7.39,
    ),
    row(
        "CIFAR-100",
        "ResNet-18",
        "AMP (Static)",
        68.7,
        22.8,
        0.35,
        8.61,
    ),
    row(
        "CIFAR-100",
        "ResNet-18",
        "Tri-Accel",
        69.9,
        22.4,
        0.34,
        9.18,
    ),
    row(
        "CIFAR-100",
        "EfficientNet-B0",
        "FP32 Baseline",
        72.8,
        21.1,
        0.33,
        10.46,
    ),
    row(
        "CIFAR-100",
        "EfficientNet-B0",
        "AMP (Static)",
        73.1,
        19.6,
        0.31,
        12.03,
    ),
    row(
        "CIFAR-100",
        "EfficientNet-B0",
        "Tri-Accel",
        74.3,
        19.0,
        0.29,
        13.48,
    ),
];

/// Largest tolerated gap between a recomputed and a printed score.
pub const PUBLISHED_SCORE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCheck {
    pub row: PublishedRow,
    pub recomputed: f64,
    pub ok: bool,
}

/// Recomputes every published score with VRAM read as a percentage of 1 GB.
pub fn check_published_scores() -> Vec<RowCheck> {
    PUBLISHED_ROWS
        .iter()
        .map(|&row| {
            let pct = mem_pct(row.vram_gb * GB, GB).expect("positive reference");
            let recomputed =
                efficiency_score(row.accuracy_pct, row.time_s, pct).expect("positive inputs");
            RowCheck {
                row,
                recomputed,
                ok: (recomputed - row.score).abs() <= PUBLISHED_SCORE_TOLERANCE,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert!((efficiency_score(77.0, 21.0, 35.0).unwrap() - 10.48).abs() < 0.005);
        assert!((efficiency_score(78.1, 19.5, 31.0).unwrap() - 12.92).abs() < 0.005);
        assert_eq!(efficiency_score(100.0, 1.0, 100.0).unwrap(), 100.0);
        assert!(efficiency_score(50.0, 0.0, 10.0).is_err());
        assert!(efficiency_score(50.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn mem_pct_examples() {
        assert!((mem_pct(0.35 * GB, GB).unwrap() - 35.0).abs() < 1e-12);
        assert_eq!(mem_pct(123.0, 123.0).unwrap(), 100.0);
        let pct = mem_pct(0.26 * GB, GB).unwrap();
        assert!((pct - 26.0).abs() < 1e-12);
        assert!(
            (efficiency_score(78.7, 17.2, pct).unwrap() - 17.59).abs() < PUBLISHED_SCORE_TOLERANCE
        );
        assert!(mem_pct(1.0, 0.0).is_err());
    }

    #[test]
    fn published_scores_recompute() {
        let checks = check_published_scores();
        assert_eq!(checks.len(), 12);
        // 77.2 / (19.4 * 32) * 100 = 12.44, printed as 12.25.
        let bad: Vec<_> = checks.iter().filter(|c| !c.ok).collect();
        assert_eq!(bad.len(), 1, "{bad:?}");
        assert_eq!(bad[0].row.method, "AMP (Static)");
        assert_eq!(bad[0].row.score, 12.25);
        assert!((bad[0].recomputed - 12.4356).abs() < 1e-4);
    }
}
