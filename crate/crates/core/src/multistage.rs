//! N-stage sampling: a uniform first stage, then per stage a bounds
//! prediction from the measurements gathered so far, a KL allocation program
//! mixing the new stage with what has already been spent, and integer
//! apportionment of the stage budget.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{self, AllocationError};
use crate::analysis::{self, AnalysisError, CurveParams};
use crate::imaging::{self, CoeffBlock, Image, ImagingError};
use crate::kl_solver::{self, KlAllocProblem, KlError, ProblemSpec, SolutionReport};
use crate::sensing::{self, GridShape, MeasurementMatrix, MeasurementRecord, SensingError};

/// Floor applied to predicted bounds before normalizing.
pub const PREDICTOR_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("sampling rate {0} outside (0, 1]")]
    InvalidRate(f64),
    #[error("at least one stage is required")]
    NoStages,
    #[error("operator dimension {found} does not match block length {expected}")]
    OperatorMismatch { expected: usize, found: usize },
    #[error("first-stage budget {budget} is below the block count {blocks}; raise the rate or lower the stage count")]
    FirstStageTooSmall { budget: u64, blocks: usize },
    #[error("cumulative measurements sum to zero")]
    ZeroCumulative,
    #[error("predictor returned {value} for block {block}")]
    BadPrediction { block: usize, value: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Solver(#[from] KlError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
}

/// `t * s_r / N - allocated / pixels`, clamped at zero.
pub fn stage_rate(t: usize, stages: usize, rate: f64, allocated: u64, pixels: usize) -> f64 {
    let target = t as f64 * rate / stages as f64;
    (target - allocated as f64 / pixels as f64).max(0.0)
}

/// `(alpha, beta)` with `alpha = s_r^t / (t * s_r / N)`; `None` when the
/// stage has nothing left to spend.
pub fn mixing_coeffs(
    t: usize,
    stages: usize,
    rate: f64,
    allocated: u64,
    pixels: usize,
) -> Option<(f64, f64)> {
    let stage = stage_rate(t, stages, rate, allocated, pixels);
    if stage <= 0.0 {
        return None;
    }
    let alpha = (stage / (t as f64 * rate / stages as f64)).min(1.0);
    Some((alpha, 1.0 - alpha))
}

/// Share of the measurements taken so far held by each block.
pub fn fixed_ratio(cumulative: &[u64]) -> Result<Vec<f64>, SimulationError> {
    let total: u64 = cumulative.iter().sum();
    if total == 0 {
        return Err(SimulationError::ZeroCumulative);
    }
    Ok(cumulative.iter().map(|&m| m as f64 / total as f64).collect())
}

/// Per-block ceiling on the stage ratio so that no block exceeds `B^2`
/// measurements: `q_i * s_r^t * pixels + cum_i <= B^2`.
///
/// Summing over blocks, `sum a_i = (pixels - allocated) / (s_r^t * pixels)`.
/// With `s_r^t = t s_r / N - allocated / pixels` this is at least 1 exactly
/// when `t s_r / N <= 1`, which holds for any rate in (0, 1].
pub fn upper_bounds(cumulative: &[u64], stage_rate: f64, pixels: usize, block_size: usize) -> Vec<f64> {
    let len = (block_size * block_size) as u64;
    let denom = stage_rate * pixels as f64;
    cumulative
        .iter()
        .map(|&m| len.saturating_sub(m) as f64 / denom)
        .collect()
}

/// True bound of a block from its coefficients.
pub fn predict_bounds_oracle(coeffs: &CoeffBlock, threshold: f64) -> f64 {
    analysis::measurement_bounds(
        analysis::block_sparsity(coeffs, threshold),
        coeffs.coefficients().len(),
    )
}

/// Population standard deviation of measured entries `2..=measured`
/// (the first is DC-like), floored at [`PREDICTOR_FLOOR`].
pub fn predict_bounds_energy(padded: &[f64], measured: usize) -> f64 {
    let end = measured.min(padded.len());
    if end < 2 {
        return PREDICTOR_FLOOR;
    }
    let tail = &padded[1..end];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt().max(PREDICTOR_FLOOR)
}

/// What a predictor may look at for one block.
#[derive(Debug, Clone, Copy)]
pub struct PredictorContext<'a> {
    pub block_index: usize,
    pub measured: usize,
    pub coeffs: &'a CoeffBlock,
    pub threshold: f64,
}

pub trait BoundsPredictor: Sync {
    fn name(&self) -> &'static str;

    /// `padded` holds the block's measurements so far, zero-padded to `B^2`.
    fn predict(&self, padded: &[f64], ctx: &PredictorContext<'_>) -> f64;
}

/// Reads the true bound off the original coefficients.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl BoundsPredictor for OraclePredictor {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn predict(&self, _padded: &[f64], ctx: &PredictorContext<'_>) -> f64 {
        predict_bounds_oracle(ctx.coeffs, ctx.threshold)
    }
}

/// Uses only the measurements.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnergyPredictor;

impl BoundsPredictor for EnergyPredictor {
    fn name(&self) -> &'static str {
        "energy"
    }

    fn predict(&self, padded: &[f64], ctx: &PredictorContext<'_>) -> f64 {
        predict_bounds_energy(padded, ctx.measured)
    }
}

/// `(cross_entropy, kl)` between the normalized true bounds and the
/// normalized, floored prediction.
pub fn kl_diagnostic(true_m: &[f64], predicted_m: &[f64]) -> Result<(f64, f64), SimulationError> {
    if true_m.len() != predicted_m.len() {
        return Err(SimulationError::LengthMismatch(format!(
            "{} true bounds vs {} predictions",
            true_m.len(),
            predicted_m.len()
        )));
    }
    let total: f64 = true_m.iter().sum();
    if !(total > 0.0) {
        return Err(SimulationError::ZeroCumulative);
    }
    let floored: Vec<f64> = predicted_m.iter().map(|v| v.max(PREDICTOR_FLOOR)).collect();
    let pred_total: f64 = floored.iter().sum();
    let mut cross = 0.0;
    let mut kl = 0.0;
    for (m, f) in true_m.iter().zip(&floored) {
        let rho = m / total;
        if rho > 0.0 {
            let rho_hat = f / pred_total;
            cross -= rho * rho_hat.ln();
            kl += rho * (rho / rho_hat).ln();
        }
    }
    Ok((cross, kl.max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub stage_index: usize,
    pub stage_rate: f64,
    pub stage_budget: u64,
    pub skipped: bool,
    pub stage_m: Vec<u64>,
    pub cumulative_m: Vec<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub predicted_bounds: Option<Vec<f64>>,
    pub problem: Option<ProblemSpec>,
    pub solution: Option<SolutionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostic {
    pub stage_index: usize,
    pub cross_entropy: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStagePlan {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub rate: f64,
    pub predictor: String,
    pub threshold: f64,
    pub true_bounds: Vec<f64>,
    pub stages: Vec<StageState>,
    pub final_m: Vec<u64>,
    pub diagnostics: Vec<StageDiagnostic>,
    /// KL of the final allocation to the true bounds ratio.
    pub final_kl: f64,
    #[serde(skip)]
    pub records: Vec<MeasurementRecord>,
}

impl MultiStagePlan {
    pub fn shape(&self) -> GridShape {
        GridShape { block_size: self.block_size, rows: self.rows, cols: self.cols }
    }

    pub fn total(&self) -> u64 {
        self.final_m.iter().sum()
    }

    pub fn reconstruct(&self, matrix: &MeasurementMatrix, height: usize, width: usize) -> Result<Image, SensingError> {
        sensing::reconstruct(&self.records, &self.final_m, self.shape(), matrix, height, width)
    }

    /// Unclamped adjoint estimate of every block.
    pub fn reconstruct_blocks(&self, matrix: &MeasurementMatrix) -> Result<Vec<imaging::Block>, SensingError> {
        sensing::reconstruct_blocks(&self.records, &self.final_m, self.shape(), matrix)
    }
}

/// Runs the full protocol. `stages = 1` reduces to uniform sampling.
pub fn run_simulation(
    image: &Image,
    block_size: usize,
    rate: f64,
    stages: usize,
    predictor: &dyn BoundsPredictor,
    matrix: &MeasurementMatrix,
    curve: &CurveParams,
) -> Result<MultiStagePlan, SimulationError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(SimulationError::InvalidRate(rate));
    }
    if stages == 0 {
        return Err(SimulationError::NoStages);
    }
    let len = block_size * block_size;
    if matrix.dim() != len {
        return Err(SimulationError::OperatorMismatch { expected: len, found: matrix.dim() });
    }
    let grid = imaging::partition(image, block_size)?;
    let coeffs = imaging::grid_coefficients(&grid);
    let truth = analysis::analyze(&coeffs, rate, curve)?;
    let threshold = truth.sparsity.threshold;
    let true_bounds = truth.bounds.per_block_m;
    let pixels = grid.padded_pixels();
    let n = grid.len();

    let mut cumulative = vec![0u64; n];
    let mut records: Vec<MeasurementRecord> = (0..n).map(MeasurementRecord::new).collect();
    let mut allocated = 0u64;
    let mut states = Vec::with_capacity(stages);
    let mut diagnostics = Vec::new();

    for t in 1..=stages {
        let s_rt = stage_rate(t, stages, rate, allocated, pixels);
        let budget = allocation::stage_budget(s_rt, pixels);
        let caps: Vec<u64> = cumulative.iter().map(|&m| len as u64 - m).collect();
        let mut state = StageState {
            stage_index: t,
            stage_rate: s_rt,
            stage_budget: budget,
            skipped: false,
            stage_m: vec![0; n],
            cumulative_m: Vec::new(),
            alpha: None,
            beta: None,
            predicted_bounds: None,
            problem: None,
            solution: None,
        };

        let counts = if t == 1 {
            if (budget as usize) < n {
                return Err(SimulationError::FirstStageTooSmall { budget, blocks: n });
            }
            let shares = vec![budget as f64 / n as f64; n];
            allocation::apportion_with_caps(&shares, budget, &caps)?
        } else if let (Some((alpha, beta)), true) = (mixing_coeffs(t, stages, rate, allocated, pixels), budget > 0) {
            let predicted = records
                .par_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let ctx = PredictorContext {
                        block_index: i,
                        measured: rec.measured_rows(),
                        coeffs: &coeffs[i],
                        threshold,
                    };
                    let v = predictor.predict(&rec.padded(len), &ctx);
                    if v.is_finite() && v >= 0.0 {
                        Ok(v)
                    } else {
                        Err(SimulationError::BadPrediction { block: i, value: v })
                    }
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let p: Vec<f64> = predicted.iter().map(|v| v.max(PREDICTOR_FLOOR)).collect();
            let r = fixed_ratio(&cumulative)?;
            let mut a = upper_bounds(&cumulative, s_rt, pixels, block_size);
            // sum a_i is exactly 1 when the last stage must fill every block;
            // floating point can land a hair below, so undo that rounding
            let room: f64 = a.iter().sum();
            if room < 1.0 && room > 1.0 - 1e-9 {
                let scale = (1.0 + 1e-12) / room;
                a.iter_mut().for_each(|v| *v *= scale);
            }
            let problem = KlAllocProblem::new(&p, &r, alpha, &a)?;
            let solution = kl_solver::solve(&problem)?;
            let shares: Vec<f64> = solution.q.iter().map(|q| q * budget as f64).collect();
            let counts = allocation::apportion_with_caps(&shares, budget, &caps)?;

            let (cross_entropy, kl) = kl_diagnostic(&true_bounds, &predicted)?;
            diagnostics.push(StageDiagnostic { stage_index: t, cross_entropy, kl });
            state.alpha = Some(alpha);
            state.beta = Some(beta);
            state.predicted_bounds = Some(predicted);
            state.problem = Some(ProblemSpec::from(&problem));
            state.solution = Some(SolutionReport::from(&solution));
            counts
        } else {
            state.skipped = true;
            vec![0; n]
        };

        records
            .par_iter_mut()
            .zip(&grid.blocks)
            .zip(&counts)
            .try_for_each(|((rec, block), &m)| {
                rec.sample_next(matrix, t, m as usize, block.values()).map(|_| ())
            })?;
        for (c, m) in cumulative.iter_mut().zip(&counts) {
            *c += m;
        }
        allocated += counts.iter().sum::<u64>();
        state.stage_m = counts;
        state.cumulative_m = cumulative.clone();
        states.push(state);
    }

    let final_m: Vec<f64> = cumulative.iter().map(|&m| m as f64).collect();
    let final_kl = if true_bounds.iter().sum::<f64>() > 0.0 {
        kl_diagnostic(&true_bounds, &final_m)?.1
    } else {
        0.0
    };
    Ok(MultiStagePlan {
        block_size,
        rows: grid.rows,
        cols: grid.cols,
        rate,
        predictor: predictor.name().to_string(),
        threshold,
        true_bounds,
        stages: states,
        final_m: cumulative,
        diagnostics,
        final_kl,
        records,
    })
}
