//! Sparsity thresholding and per-block measurement bounds.
//!
//! A block's DCT coefficients above a global magnitude threshold `T` count
//! toward its sparsity `k`. `T` is chosen so that the fraction of surviving
//! coefficients over the whole grid matches a target ratio, itself derived
//! from the overall sampling rate through a fitted logarithmic curve. The
//! block's measurement bound is then `k * log10(n / k)` with `n = B^2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::CoeffBlock;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("sampling rate {rate} is below the curve anchor {anchor}")]
    RateBelowAnchor { rate: f64, anchor: f64 },
    #[error("target sparsity ratio {0} is outside (0, 1)")]
    RatioOutOfRange(f64),
    #[error("invalid curve parameters: {0}")]
    InvalidCurve(String),
    #[error("no coefficients to threshold")]
    EmptyCoefficients,
}

/// Parameters of `p_s = b * ln(a * (s_r - s_r1) + 1) + p_s1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub a: f64,
    pub b: f64,
    pub s_r1: f64,
    pub p_s1: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            a: 78.77,
            b: 0.0444,
            s_r1: 0.01,
            p_s1: 0.005,
        }
    }
}

impl CurveParams {
    pub fn new(a: f64, b: f64, s_r1: f64, p_s1: f64) -> Result<Self, AnalysisError> {
        let params = Self { a, b, s_r1, p_s1 };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(AnalysisError::InvalidCurve(format!("a = {} must be > 0", self.a)));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(AnalysisError::InvalidCurve(format!("b = {} must be > 0", self.b)));
        }
        if !open_unit(self.s_r1) {
            return Err(AnalysisError::InvalidCurve(format!(
                "s_r1 = {} must lie in (0, 1)",
                self.s_r1
            )));
        }
        if !open_unit(self.p_s1) {
            return Err(AnalysisError::InvalidCurve(format!(
                "p_s1 = {} must lie in (0, 1)",
                self.p_s1
            )));
        }
        Ok(())
    }
}

/// Overall sparsity ratio to aim for at sampling rate `s_r`.
pub fn target_sparsity_ratio(s_r: f64, params: &CurveParams) -> Result<f64, AnalysisError> {
    if !(s_r >= params.s_r1) {
        return Err(AnalysisError::RateBelowAnchor {
            rate: s_r,
            anchor: params.s_r1,
        });
    }
    let ratio = params.b * (params.a * (s_r - params.s_r1)).ln_1p() + params.p_s1;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AnalysisError::RatioOutOfRange(ratio));
    }
    Ok(ratio)
}

/// Coefficient magnitudes at or below this are transform round-off and
/// count as exact zeros. Without it, flat blocks (whose AC coefficients are
/// ~1e-15 rather than 0) would let the threshold search settle inside the
/// noise.
pub const ROUNDOFF_FLOOR: f64 = 1e-9;

/// `|f|`, with round-off snapped to zero.
pub fn significant_magnitude(f: f64) -> f64 {
    let m = f.abs();
    if m <= ROUNDOFF_FLOOR {
        0.0
    } else {
        m
    }
}

/// Number of coefficients with `|f| > threshold`.
pub fn block_sparsity(coeffs: &CoeffBlock, threshold: f64) -> usize {
    coeffs
        .coefficients()
        .iter()
        .filter(|f| significant_magnitude(**f) > threshold)
        .count()
}

/// Fraction of coefficients over all blocks with `|f| > threshold`.
pub fn sparsity_ratio(blocks: &[CoeffBlock], threshold: f64) -> f64 {
    let total: usize = blocks.iter().map(|b| b.coefficients().len()).sum();
    if total == 0 {
        return 0.0;
    }
    let kept: usize = blocks.iter().map(|b| block_sparsity(b, threshold)).sum();
    kept as f64 / total as f64
}

/// Exhaustive search over `{0} ∪ {|f|}` (after round-off snapping) for the threshold whose sparsity
/// ratio is closest to `target`. Exact distance ties go to the smaller
/// threshold.
pub fn solve_threshold(blocks: &[CoeffBlock], target: f64) -> Result<f64, AnalysisError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(AnalysisError::RatioOutOfRange(target));
    }
    let mut mags: Vec<f64> = blocks
        .iter()
        .flat_map(|b| b.coefficients().iter().map(|f| significant_magnitude(*f)))
        .collect();
    if mags.is_empty() {
        return Err(AnalysisError::EmptyCoefficients);
    }
    mags.sort_by(f64::total_cmp);
    let total = mags.len();

    // Ratio at threshold T is (#mags > T) / total. Scanning the sorted list,
    // the first index whose value exceeds T is the end of the run equal to T.
    let mut best = (0.0, f64::INFINITY);
    let mut consider = |t: f64, above: usize| {
        let dist = (above as f64 / total as f64 - target).abs();
        if dist < best.1 {
            best = (t, dist);
        }
    };
    let zeros = mags.partition_point(|&m| m <= 0.0);
    consider(0.0, total - zeros);
    let mut i = zeros;
    while i < total {
        let t = mags[i];
        let mut j = i + 1;
        while j < total && mags[j] == t {
            j += 1;
        }
        consider(t, total - j);
        i = j;
    }
    Ok(best.0)
}

/// Per-block sparsity under a fixed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub threshold: f64,
    pub overall_ratio: f64,
    pub per_block_k: Vec<usize>,
}

pub fn sparsity_profile(blocks: &[CoeffBlock], threshold: f64) -> SparsityProfile {
    let per_block_k: Vec<usize> = blocks.iter().map(|b| block_sparsity(b, threshold)).collect();
    let total: usize = blocks.iter().map(|b| b.coefficients().len()).sum();
    let kept: usize = per_block_k.iter().sum();
    SparsityProfile {
        threshold,
        overall_ratio: if total == 0 { 0.0 } else { kept as f64 / total as f64 },
        per_block_k,
    }
}

/// `k * log10(n / k)` on the monotone envelope: `k` is clamped to
/// `floor(n / e)`, where the unclamped curve peaks. Zero for `k = 0`.
pub fn measurement_bounds(k: usize, n: usize) -> f64 {
    if k == 0 || n == 0 {
        return 0.0;
    }
    let peak = ((n as f64) / std::f64::consts::E).floor().max(1.0) as usize;
    let k_eff = k.min(peak) as f64;
    k_eff * (n as f64 / k_eff).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsProfile {
    pub per_block_m: Vec<f64>,
}

impl BoundsProfile {
    pub fn total(&self) -> f64 {
        self.per_block_m.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.per_block_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_block_m.is_empty()
    }
}

pub fn bounds_from_sparsity(profile: &SparsityProfile, block_len: usize) -> BoundsProfile {
    BoundsProfile {
        per_block_m: profile
            .per_block_k
            .iter()
            .map(|&k| measurement_bounds(k, block_len))
            .collect(),
    }
}

pub fn bounds_profile(blocks: &[CoeffBlock], threshold: f64) -> BoundsProfile {
    BoundsProfile {
        per_block_m: blocks
            .iter()
            .map(|b| measurement_bounds(block_sparsity(b, threshold), b.coefficients().len()))
            .collect(),
    }
}

/// Result of the full threshold analysis at one sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub rate: f64,
    pub target_ratio: f64,
    pub sparsity: SparsityProfile,
    pub bounds: BoundsProfile,
}

/// Target ratio from the curve, threshold by exhaustive search, then
/// per-block sparsity and bounds.
pub fn analyze(blocks: &[CoeffBlock], s_r: f64, curve: &CurveParams) -> Result<Analysis, AnalysisError> {
    curve.validate()?;
    let target_ratio = target_sparsity_ratio(s_r, curve)?;
    let threshold = solve_threshold(blocks, target_ratio)?;
    let sparsity = sparsity_profile(blocks, threshold);
    let block_len = blocks.first().map_or(0, |b| b.coefficients().len());
    let bounds = bounds_from_sparsity(&sparsity, block_len);
    Ok(Analysis {
        rate: s_r,
        target_ratio,
        sparsity,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{dct2, Block};

    fn coeffs(values: &[f64]) -> CoeffBlock {
        let size = (values.len() as f64).sqrt() as usize;
        CoeffBlock::new(size, values.to_vec()).unwrap()
    }

    fn brute_threshold(blocks: &[CoeffBlock], target: f64) -> (f64, f64) {
        let mut cands = vec![0.0];
        for b in blocks {
            cands.extend(b.coefficients().iter().map(|f| f.abs()));
        }
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mut best = (f64::NAN, f64::INFINITY);
        for t in cands {
            let d = (sparsity_ratio(blocks, t) - target).abs();
            if d < best.1 {
                best = (t, d);
            }
        }
        best
    }

    #[test]
    fn curve_anchor_is_exact() {
        let p = CurveParams::default();
        assert_eq!(target_sparsity_ratio(0.01, &p).unwrap(), 0.005);
        let q = CurveParams::new(3.0, 0.1, 0.2, 0.3).unwrap();
        assert_eq!(target_sparsity_ratio(0.2, &q).unwrap(), 0.3);
    }

    #[test]
    fn curve_at_tenth() {
        // 0.0444 * ln(1 + 78.77 * 0.09) + 0.005, evaluated with mpmath at 50 digits
        let v = target_sparsity_ratio(0.1, &CurveParams::default()).unwrap();
        assert!((v - 0.097_820_073_713_332_87).abs() < 1e-13, "{v}");
    }

    #[test]
    fn curve_rejects_out_of_range() {
        let p = CurveParams::default();
        assert!(matches!(
            target_sparsity_ratio(0.005, &p),
            Err(AnalysisError::RateBelowAnchor { .. })
        ));
        let steep = CurveParams::new(1e6, 0.5, 0.01, 0.5).unwrap();
        assert!(matches!(
            target_sparsity_ratio(0.9, &steep),
            Err(AnalysisError::RatioOutOfRange(_))
        ));
        assert!(CurveParams::new(-1.0, 0.1, 0.1, 0.1).is_err());
        assert!(CurveParams::new(1.0, 0.1, 1.0, 0.1).is_err());
    }

    #[test]
    fn curve_json_uses_named_fields() {
        let json = serde_json::to_string(&CurveParams::default()).unwrap();
        assert_eq!(json, r#"{"a":78.77,"b":0.0444,"s_r1":0.01,"p_s1":0.005}"#);
    }

    #[test]
    fn ratio_examples() {
        let blocks = vec![coeffs(&[1.0, 2.0, 3.0, 4.0]), coeffs(&[0.0, 0.0, 0.0, 5.0])];
        assert_eq!(sparsity_ratio(&blocks, 2.5), 3.0 / 8.0);
        assert_eq!(sparsity_ratio(&blocks, 5.0), 0.0);
        assert_eq!(sparsity_ratio(&blocks[..1], 0.0), 1.0);
    }

    #[test]
    fn threshold_examples() {
        let one = vec![coeffs(&[1.0, -2.0, 3.0, 4.0])];
        assert_eq!(solve_threshold(&one, 1.0).unwrap(), 0.0);
        assert_eq!(solve_threshold(&one, 0.5).unwrap(), 2.0);
        assert_eq!(solve_threshold(&one, 0.6).unwrap(), 2.0);
        // 0.625 is equidistant from 0.75 (T=1) and 0.5 (T=2)
        assert_eq!(solve_threshold(&one, 0.625).unwrap(), 1.0);
        assert!(matches!(solve_threshold(&[], 0.5), Err(AnalysisError::EmptyCoefficients)));
        assert!(solve_threshold(&one, 0.0).is_err());
    }

    #[test]
    fn threshold_matches_brute_force() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) % 50) as f64 / 7.0 - 3.0
        };
        for trial in 0..50 {
            let blocks: Vec<_> = (0..4)
                .map(|_| coeffs(&(0..16).map(|_| next()).collect::<Vec<_>>()))
                .collect();
            let target = (trial as f64 + 0.5) / 50.0;
            let t = solve_threshold(&blocks, target).unwrap();
            let (bt, bd) = brute_threshold(&blocks, target);
            assert_eq!(t, bt);
            assert_eq!((sparsity_ratio(&blocks, t) - target).abs(), bd);
        }
    }

    #[test]
    fn sparsity_ratio_is_monotone() {
        let blocks = vec![coeffs(&[0.5, 1.5, 1.5, 3.0]), coeffs(&[0.0, 2.0, 0.1, 9.0])];
        let mut cands: Vec<f64> = blocks
            .iter()
            .flat_map(|b| b.coefficients().iter().map(|f| significant_magnitude(*f)))
            .collect();
        cands.sort_by(f64::total_cmp);
        for w in cands.windows(2) {
            assert!(sparsity_ratio(&blocks, w[0]) >= sparsity_ratio(&blocks, w[1]));
        }
    }

    #[test]
    fn block_sparsity_examples() {
        assert_eq!(block_sparsity(&coeffs(&[0.0; 16]), 0.3), 0);
        assert_eq!(block_sparsity(&coeffs(&[1.0, -1.0, 2.0, 0.1]), 0.0), 4);
        assert_eq!(block_sparsity(&coeffs(&[0.1, 5.0, 5.0, 0.2]), 1.0), 2);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(measurement_bounds(0, 1024), 0.0);
        let m = measurement_bounds(102, 1024);
        assert!((m - 102.0 * (1024.0f64 / 102.0).log10()).abs() < 1e-12);
        assert!((m - 102.173_378_057_545_23).abs() < 1e-10);
        let full = measurement_bounds(1024, 1024);
        assert_eq!(full, measurement_bounds(376, 1024));
        assert!((full - 163.602_154_003_768_74).abs() < 1e-10, "{full}");
    }

    #[test]
    fn bounds_are_monotone() {
        for n in [16, 64, 256, 1024] {
            for k in 1..=n {
                assert!(measurement_bounds(k, n) >= measurement_bounds(k - 1, n), "n={n} k={k}");
                assert!(measurement_bounds(k, n) > 0.0);
            }
        }
    }

    #[test]
    fn bounds_profile_examples() {
        let zero = vec![coeffs(&[0.0; 16]); 4];
        assert!(bounds_profile(&zero, 0.0).per_block_m.iter().all(|&m| m == 0.0));

        let flat = Block::devectorize(8, vec![0.5; 64]).unwrap();
        let mut check = Block::zeros(8);
        for r in 0..8 {
            for c in 0..8 {
                check.set(r, c, ((r + c) % 2) as f64);
            }
        }
        let same = vec![dct2(&flat), dct2(&flat), dct2(&flat)];
        let p = bounds_profile(&same, 0.1);
        assert!(p.per_block_m.windows(2).all(|w| w[0] == w[1]));

        let mixed = vec![dct2(&flat), dct2(&check), dct2(&flat)];
        let p = bounds_profile(&mixed, 1e-6);
        // flat: DC only -> k = 1; checkerboard spreads over many coefficients
        assert_eq!(p.per_block_m[0], measurement_bounds(1, 64));
        assert!(p.per_block_m[1] > p.per_block_m[0]);
        assert!(p.per_block_m[1] > p.per_block_m[2]);
        let k = block_sparsity(&mixed[1], 1e-6);
        assert_eq!(p.per_block_m[1], measurement_bounds(k, 64));
    }

    #[test]
    fn profile_ratio_matches_counts() {
        let blocks = vec![coeffs(&[1.0, 2.0, 3.0, 4.0]), coeffs(&[0.0, 0.0, 0.0, 5.0])];
        let p = sparsity_profile(&blocks, 2.5);
        assert_eq!(p.per_block_k, vec![2, 1]);
        assert_eq!(p.overall_ratio, 3.0 / 8.0);
    }
}
