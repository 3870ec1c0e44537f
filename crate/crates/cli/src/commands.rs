use std::path::Path;

use serde::Serialize;

use rate_alloc::allocation::{self, AllocationPlan};
use rate_alloc::analysis::{self, CurveParams};
use rate_alloc::imaging::{self, Image};
use rate_alloc::kl_solver::{self, KlAllocProblem, ProblemSpec, SolutionReport};
use rate_alloc::multistage::{self, BoundsPredictor, EnergyPredictor, MultiStagePlan, OraclePredictor};
use rate_alloc::report::{int_heatmap_csv, real_heatmap_csv};
use rate_alloc::sensing::{self, GridShape, MeasurementMatrix};

use crate::error::CliError;
use crate::output::OutDir;
use crate::{ImageArgs, Policy, PredictorKind, SimulateArgs};

/// Largest solver/oracle gap and KKT residual accepted by `solve --verify`.
pub const VERIFY_TOLERANCE: f64 = 1e-8;

fn load_image(args: &ImageArgs) -> Result<(Image, String), CliError> {
    if let Some(path) = &args.image {
        return Ok((imaging::load_pgm(path)?, path.display().to_string()));
    }
    let kind = args.synthetic.ok_or_else(|| CliError::input("either --image or --synthetic is required"))?;
    if args.block_size < 2 {
        return Err(CliError::input(format!("block size must be at least 2, got {}", args.block_size)));
    }
    Ok((kind.render(args.block_size), format!("synthetic:{}", synthetic_name(kind))))
}

fn synthetic_name(kind: rate_alloc::synthetic::SyntheticKind) -> &'static str {
    use rate_alloc::synthetic::SyntheticKind::*;
    match kind {
        Flat => "flat",
        CheckerBlock => "checker-block",
        Gradient => "gradient",
    }
}

fn check_rate(rate: f64) -> Result<(), CliError> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(CliError::input(format!("--rate must lie in (0, 1], got {rate}")))
    }
}

fn predictor(kind: PredictorKind) -> &'static dyn BoundsPredictor {
    match kind {
        PredictorKind::Oracle => &OraclePredictor,
        PredictorKind::Energy => &EnergyPredictor,
    }
}

fn as_reals(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&m| m as f64).collect()
}

fn kl_to_bounds(true_bounds: &[f64], counts: &[u64]) -> Result<f64, CliError> {
    if true_bounds.iter().sum::<f64>() > 0.0 {
        Ok(multistage::kl_diagnostic(true_bounds, &as_reals(counts))?.1)
    } else {
        Ok(0.0)
    }
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    source: &'a str,
    height: usize,
    width: usize,
    block_size: usize,
    rows: usize,
    cols: usize,
    rate: f64,
    curve: CurveParams,
    threshold: f64,
    target_sparsity_ratio: f64,
    overall_sparsity_ratio: f64,
    total_bounds: f64,
}

pub fn analyze(args: &ImageArgs) -> Result<(), CliError> {
    check_rate(args.rate)?;
    let (image, source) = load_image(args)?;
    let grid = imaging::partition(&image, args.block_size)?;
    let coeffs = imaging::grid_coefficients(&grid);
    let result = analysis::analyze(&coeffs, args.rate, &args.curve)?;

    let out = OutDir::create(&args.out)?;
    out.write("sparsity.csv", int_heatmap_csv(&result.sparsity.per_block_k, grid.rows, grid.cols).as_bytes())?;
    out.write("bounds.csv", real_heatmap_csv(&result.bounds.per_block_m, grid.rows, grid.cols).as_bytes())?;
    let summary = AnalyzeSummary {
        source: &source,
        height: image.height(),
        width: image.width(),
        block_size: args.block_size,
        rows: grid.rows,
        cols: grid.cols,
        rate: args.rate,
        curve: args.curve,
        threshold: result.sparsity.threshold,
        target_sparsity_ratio: result.target_ratio,
        overall_sparsity_ratio: result.sparsity.overall_ratio,
        total_bounds: result.bounds.total(),
    };
    out.write_json("analysis.json", &summary)?;

    println!("threshold T = {}", summary.threshold);
    println!("target sparsity ratio = {}", summary.target_sparsity_ratio);
    println!("achieved sparsity ratio = {}", summary.overall_sparsity_ratio);
    println!("total bounds = {}", summary.total_bounds);
    Ok(())
}

fn build_plan(image: &Image, args: &ImageArgs, policy: Policy) -> Result<AllocationPlan, CliError> {
    Ok(match policy {
        Policy::Uniform => allocation::uniform_plan(image, args.block_size, args.rate)?,
        Policy::Bounds => allocation::single_stage_plan(image, args.block_size, args.rate, &args.curve)?,
    })
}

pub fn allocate(args: &ImageArgs, policy: Policy) -> Result<(), CliError> {
    check_rate(args.rate)?;
    let (image, _) = load_image(args)?;
    let plan = build_plan(&image, args, policy)?;

    let out = OutDir::create(&args.out)?;
    out.write_json("plan.json", &plan)?;
    out.write("allocation.csv", int_heatmap_csv(&plan.per_block_m, plan.rows, plan.cols).as_bytes())?;

    println!("total measurements = {} (budget {})", plan.total(), plan.total_budget);
    println!("implied eta = {}", plan.eta);
    Ok(())
}

#[derive(Serialize)]
struct SimulationReport<'a> {
    source: &'a str,
    height: usize,
    width: usize,
    operator_seed: u64,
    total_measurements: u64,
    psnr_db: f64,
    adjoint_psnr_db: f64,
    plan: &'a MultiStagePlan,
}

fn operator(args: &SimulateArgs) -> Result<MeasurementMatrix, CliError> {
    Ok(sensing::build_matrix(args.image.block_size, args.seed)?)
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = &args.image;
    check_rate(cfg.rate)?;
    let (image, source) = load_image(cfg)?;
    let matrix = operator(args)?;
    let plan = multistage::run_simulation(
        &image,
        cfg.block_size,
        cfg.rate,
        args.stages,
        predictor(args.predictor),
        &matrix,
        &cfg.curve,
    )?;
    let estimate = plan.reconstruct(&matrix, image.height(), image.width())?;
    let psnr = sensing::psnr(&image, &estimate)?;
    let adjoint = sensing::linear_psnr(&image, &plan.reconstruct_blocks(&matrix)?, plan.shape())?;

    let out = OutDir::create(&cfg.out)?;
    for stage in &plan.stages {
        let name = format!("stage_{}.csv", stage.stage_index);
        out.write(&name, int_heatmap_csv(&stage.stage_m, plan.rows, plan.cols).as_bytes())?;
    }
    out.write("allocation.csv", int_heatmap_csv(&plan.final_m, plan.rows, plan.cols).as_bytes())?;
    out.write("reconstruction.pgm", &imaging::encode_pgm(&estimate))?;
    out.write_json(
        "simulation.json",
        &SimulationReport {
            source: &source,
            height: image.height(),
            width: image.width(),
            operator_seed: matrix.seed(),
            total_measurements: plan.total(),
            psnr_db: psnr,
            adjoint_psnr_db: adjoint,
            plan: &plan,
        },
    )?;

    println!("total measurements = {}", plan.total());
    println!("final KL to bounds = {}", plan.final_kl);
    println!("psnr = {psnr:.4} dB (adjoint, unclamped {adjoint:.4} dB)");
    Ok(())
}

pub fn solve(path: &Path, verify: bool, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let spec: ProblemSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::input(format!("{}: invalid problem JSON: {e}", path.display())))?;
    let problem = KlAllocProblem::try_from(&spec)?;
    let solution = kl_solver::solve(&problem)?;
    let report = SolutionReport::from(&solution);

    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::internal(format!("cannot serialize solution: {e}")))?;
    json.push('\n');
    if let Some(dir) = out {
        OutDir::create(dir)?.write("solution.json", json.as_bytes())?;
    }
    print!("{json}");

    if verify {
        let oracle = kl_solver::oracle_solve(&problem)?;
        let gap = solution
            .q
            .iter()
            .zip(&oracle.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let residual = kl_solver::kkt_residual(&problem, &solution.q, solution.mu_star);
        eprintln!("verify: oracle gap = {gap:e}, KKT residual = {residual:e}");
        if !(gap <= VERIFY_TOLERANCE && residual <= VERIFY_TOLERANCE) {
            return Err(CliError::verify(format!(
                "verification failed: oracle gap {gap:e}, KKT residual {residual:e} (tolerance {VERIFY_TOLERANCE:e})"
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    allocation: String,
    total_measurements: u64,
    psnr_db: f64,
    adjoint_psnr_db: f64,
    kl_to_bounds: f64,
}

#[derive(Serialize)]
struct CompareReport<'a> {
    source: &'a str,
    block_size: usize,
    rate: f64,
    stages: usize,
    predictor: &'a str,
    operator_seed: u64,
    rows: Vec<CompareRow>,
}

pub fn compare(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = &args.image;
    check_rate(cfg.rate)?;
    let (image, source) = load_image(cfg)?;
    let matrix = operator(args)?;
    let (h, w) = (image.height(), image.width());

    let single = build_plan(&image, cfg, Policy::Bounds)?;
    let true_bounds = single.bounds.as_ref().map(|b| b.per_block_m.clone()).unwrap_or_default();
    let mut rows = Vec::new();
    for plan in [build_plan(&image, cfg, Policy::Uniform)?, single] {
        let shape = GridShape { block_size: plan.block_size, rows: plan.rows, cols: plan.cols };
        let records = sensing::sample_plan(&image, &plan, &matrix)?;
        let estimate = sensing::reconstruct_plan(&plan, &records, &matrix, h, w)?;
        let blocks = sensing::reconstruct_blocks(&records, &plan.per_block_m, shape, &matrix)?;
        rows.push(CompareRow {
            allocation: match plan.policy {
                allocation::AllocationPolicy::Uniform => "uniform".into(),
                allocation::AllocationPolicy::Bounds => "single-stage".into(),
            },
            total_measurements: plan.total(),
            psnr_db: sensing::psnr(&image, &estimate)?,
            adjoint_psnr_db: sensing::linear_psnr(&image, &blocks, shape)?,
            kl_to_bounds: kl_to_bounds(&true_bounds, &plan.per_block_m)?,
        });
    }

    let pred = predictor(args.predictor);
    let multi = multistage::run_simulation(&image, cfg.block_size, cfg.rate, args.stages, pred, &matrix, &cfg.curve)?;
    let estimate = multi.reconstruct(&matrix, h, w)?;
    rows.push(CompareRow {
        allocation: format!("{}-stage {}", args.stages, pred.name()),
        total_measurements: multi.total(),
        psnr_db: sensing::psnr(&image, &estimate)?,
        adjoint_psnr_db: sensing::linear_psnr(&image, &multi.reconstruct_blocks(&matrix)?, multi.shape())?,
        kl_to_bounds: kl_to_bounds(&true_bounds, &multi.final_m)?,
    });

    println!("{:<20} {:>12} {:>10} {:>14} {:>14}", "allocation", "measurements", "psnr_db", "adjoint_db", "kl_to_bounds");
    for r in &rows {
        println!(
            "{:<20} {:>12} {:>10.4} {:>14.4} {:>14.6}",
            r.allocation, r.total_measurements, r.psnr_db, r.adjoint_psnr_db, r.kl_to_bounds
        );
    }

    let out = OutDir::create(&cfg.out)?;
    out.write_json(
        "compare.json",
        &CompareReport {
            source: &source,
            block_size: cfg.block_size,
            rate: cfg.rate,
            stages: args.stages,
            predictor: pred.name(),
            operator_seed: matrix.seed(),
            rows,
        },
    )?;
    Ok(())
}
