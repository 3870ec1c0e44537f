//! Adaptive allocation of compressed-sensing measurement budgets across image
//! blocks.
//!
//! The crate is organized as a pipeline:
//!
//! - [`imaging`]: PGM I/O, block partitioning, orthonormal 2-D DCT.
//! - [`analysis`]: sparsity-threshold selection and per-block measurement bounds.
//! - [`allocation`]: exact integer apportionment of a budget in proportion to bounds.
//! - [`kl_solver`]: the KL-divergence allocation program used between stages,
//!   solved by Newton iteration on a piecewise-linear function with a bisection
//!   fallback.
//! - [`multistage`]: the N-stage sampling protocol built on the solver.
//! - [`sensing`]: a seeded orthonormal measurement operator, row-sliced
//!   sampling and adjoint reconstruction.
//! - [`synthetic`]: small built-in test images.
//! - [`report`]: CSV heatmaps of per-block values.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod analysis;
pub mod imaging;
pub mod kl_solver;
pub mod multistage;
pub mod report;
pub mod sensing;
pub mod synthetic;

pub use allocation::{AllocationError, AllocationPlan};
pub use analysis::{AnalysisError, BoundsProfile, CurveParams, SparsityProfile};
pub use imaging::{BlockGrid, CoeffBlock, Image, ImagingError, PgmError};
pub use kl_solver::{KlAllocProblem, KlAllocSolution, KlError, SegmentSets, SolveStatus};
pub use multistage::{BoundsPredictor, EnergyPredictor, MultiStagePlan, OraclePredictor, SimulationError, StageState};
pub use sensing::{MeasurementMatrix, MeasurementRecord, SensingError};
