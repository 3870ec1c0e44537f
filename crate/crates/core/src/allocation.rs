//! Integer measurement budgets from real-valued bounds.
//!
//! Shares proportional to the bounds are rounded by the largest-remainder
//! method, so the realized total always equals the requested budget. Blocks
//! cannot take more than `B^2` measurements; any excess is clamped and handed
//! back to the remaining blocks in proportion to their shares.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, BoundsProfile, CurveParams};
use crate::imaging::{self, Image, ImagingError};

#[derive(Debug, Error, PartialEq)]
pub enum AllocationError {
    #[error("budget {budget} exceeds total capacity {capacity}")]
    Infeasible { budget: u64, capacity: u64 },
    #[error("invalid share {value} at block {index}")]
    InvalidShare { index: usize, value: f64 },
    #[error("sampling rate {0} outside (0, 1]")]
    InvalidRate(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// `budget * m_i / sum m`, or uniform shares when every bound is zero.
pub fn proportional_shares(bounds: &BoundsProfile, budget: u64) -> Vec<f64> {
    proportional_shares_of(&bounds.per_block_m, budget)
}

pub fn proportional_shares_of(weights: &[f64], budget: u64) -> Vec<f64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let total: f64 = weights.iter().sum();
    let budget = budget as f64;
    if total > 0.0 {
        weights.iter().map(|m| budget * m / total).collect()
    } else {
        vec![budget / n as f64; n]
    }
}

// Floors the shares and hands out the difference one unit at a time by
// descending fractional part; ties go to the lower index.
fn largest_remainder(shares: &[f64], budget: u64) -> Vec<u64> {
    let n = shares.len();
    let mut counts: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    if n == 0 || assigned == budget {
        return counts;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let frac = |i: usize| shares[i] - shares[i].floor();
    if assigned < budget {
        order.sort_by(|&i, &j| frac(j).total_cmp(&frac(i)).then(i.cmp(&j)));
        let mut deficit = budget - assigned;
        for &i in order.iter().cycle() {
            if deficit == 0 {
                break;
            }
            counts[i] += 1;
            deficit -= 1;
        }
    } else {
        // shares overshoot the budget by rounding noise; trim smallest remainders
        order.sort_by(|&i, &j| frac(i).total_cmp(&frac(j)).then(j.cmp(&i)));
        let mut excess = assigned - budget;
        while excess > 0 {
            let mut progressed = false;
            for &i in &order {
                if excess == 0 {
                    break;
                }
                if counts[i] > 0 {
                    counts[i] -= 1;
                    excess -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }
    counts
}

/// Largest-remainder rounding with a uniform per-block cap.
pub fn apportion(shares: &[f64], budget: u64, cap: u64) -> Result<Vec<u64>, AllocationError> {
    apportion_with_caps(shares, budget, &vec![cap; shares.len()])
}

/// Largest-remainder rounding with per-block caps. Overflow above a cap is
/// clamped and re-apportioned over the blocks still below their caps, in
/// proportion to their shares (uniformly if those shares are all zero),
/// until no block exceeds its cap. The result always sums to `budget`.
pub fn apportion_with_caps(
    shares: &[f64],
    budget: u64,
    caps: &[u64],
) -> Result<Vec<u64>, AllocationError> {
    if caps.len() != shares.len() {
        return Err(AllocationError::LengthMismatch(format!(
            "{} shares but {} caps",
            shares.len(),
            caps.len()
        )));
    }
    if let Some((index, &value)) = shares
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && **s >= 0.0))
    {
        return Err(AllocationError::InvalidShare { index, value });
    }
    let capacity: u64 = caps.iter().sum();
    if budget > capacity {
        return Err(AllocationError::Infeasible { budget, capacity });
    }
    let mut counts = largest_remainder(shares, budget);
    loop {
        let mut surplus = 0;
        for (c, &cap) in counts.iter_mut().zip(caps) {
            if *c > cap {
                surplus += *c - cap;
                *c = cap;
            }
        }
        if surplus == 0 {
            return Ok(counts);
        }
        let open: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < caps[i]).collect();
        let weights: Vec<f64> = open.iter().map(|&i| shares[i]).collect();
        let extra = largest_remainder(&proportional_shares_of(&weights, surplus), surplus);
        for (&i, e) in open.iter().zip(extra) {
            counts[i] += e;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationPolicy {
    Uniform,
    Bounds,
}

/// Integer measurement counts per block for one sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub policy: AllocationPolicy,
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub rate: f64,
    pub total_budget: u64,
    /// Row-major over the block grid.
    pub per_block_m: Vec<u64>,
    pub per_block_rate: Vec<f64>,
    pub threshold: Option<f64>,
    pub target_sparsity_ratio: Option<f64>,
    pub bounds: Option<BoundsProfile>,
    /// `total_budget / (rate * padded pixels)`.
    pub eta: f64,
}

impl AllocationPlan {
    pub fn padded_pixels(&self) -> usize {
        self.rows * self.cols * self.block_size * self.block_size
    }

    pub fn total(&self) -> u64 {
        self.per_block_m.iter().sum()
    }
}

/// `round(s_r * padded pixels)`.
pub fn stage_budget(rate: f64, padded_pixels: usize) -> u64 {
    (rate * padded_pixels as f64).round().max(0.0) as u64
}

fn check_rate(rate: f64) -> Result<(), AllocationError> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(AllocationError::InvalidRate(rate))
    }
}

fn build_plan(
    policy: AllocationPolicy,
    grid: &imaging::BlockGrid,
    rate: f64,
    budget: u64,
    per_block_m: Vec<u64>,
) -> AllocationPlan {
    let len = (grid.block_size * grid.block_size) as f64;
    let padded = grid.padded_pixels();
    AllocationPlan {
        policy,
        block_size: grid.block_size,
        rows: grid.rows,
        cols: grid.cols,
        rate,
        total_budget: budget,
        per_block_rate: per_block_m.iter().map(|&m| m as f64 / len).collect(),
        per_block_m,
        threshold: None,
        target_sparsity_ratio: None,
        bounds: None,
        eta: budget as f64 / (rate * padded as f64),
    }
}

/// Equal share per block, remainder to the lowest indices.
pub fn uniform_plan(image: &Image, block_size: usize, rate: f64) -> Result<AllocationPlan, AllocationError> {
    check_rate(rate)?;
    let grid = imaging::partition(image, block_size)?;
    let budget = stage_budget(rate, grid.padded_pixels());
    let shares = vec![budget as f64 / grid.len() as f64; grid.len()];
    let cap = (block_size * block_size) as u64;
    let counts = apportion(&shares, budget, cap)?;
    Ok(build_plan(AllocationPolicy::Uniform, &grid, rate, budget, counts))
}

/// Partition, DCT, threshold selection, bounds, then proportional
/// apportionment of `round(s_r * padded pixels)` measurements.
pub fn single_stage_plan(
    image: &Image,
    block_size: usize,
    rate: f64,
    curve: &CurveParams,
) -> Result<AllocationPlan, AllocationError> {
    check_rate(rate)?;
    let grid = imaging::partition(image, block_size)?;
    let coeffs = imaging::grid_coefficients(&grid);
    let analysis = analysis::analyze(&coeffs, rate, curve)?;
    let budget = stage_budget(rate, grid.padded_pixels());
    let shares = proportional_shares(&analysis.bounds, budget);
    let cap = (block_size * block_size) as u64;
    let counts = apportion(&shares, budget, cap)?;
    let mut plan = build_plan(AllocationPolicy::Bounds, &grid, rate, budget, counts);
    plan.threshold = Some(analysis.sparsity.threshold);
    plan.target_sparsity_ratio = Some(analysis.target_ratio);
    plan.bounds = Some(analysis.bounds);
    Ok(plan)
}
