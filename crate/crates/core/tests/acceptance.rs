//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{max_abs_diff, random_image, random_problem, random_size, rng};
use rand::Rng;
use rate_alloc::allocation::{self, single_stage_plan, uniform_plan};
use rate_alloc::analysis::{target_sparsity_ratio, CurveParams};
use rate_alloc::imaging::{dct2, idct2, Block, Dct2};
use rate_alloc::kl_solver::{self, KlError, NewtonStep, SolveStatus};
use rate_alloc::multistage::{kl_diagnostic, run_simulation, BoundsPredictor, EnergyPredictor, OraclePredictor};
use rate_alloc::sensing::{self, adjoint_reconstruct, build_matrix, psnr, sample_rows, GridShape, MeasurementMatrix};
use rate_alloc::{synthetic, Image, KlAllocProblem};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn operator32() -> &'static MeasurementMatrix {
    static OP: OnceLock<MeasurementMatrix> = OnceLock::new();
    OP.get_or_init(|| build_matrix(32, 2024).expect("operator builds"))
}

fn agreement_corpus() -> &'static Vec<KlAllocProblem> {
    static CORPUS: OnceLock<Vec<KlAllocProblem>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let mut g = rng(1001);
        (0..1000)
            .map(|_| {
                let n = random_size(&mut g);
                random_problem(&mut g, n)
            })
            .collect()
    })
}

fn solver_oracle_equivalence() -> Check {
    let start = Instant::now();
    let (mut gap, mut sum_err, mut kkt) = (0.0f64, 0.0f64, 0.0f64);
    let (mut zero_p, mut zero_a, mut tight) = (0, 0, 0);
    for prob in agreement_corpus() {
        let s = kl_solver::solve(prob).map_err(|e| e.to_string())?;
        let o = kl_solver::oracle_solve(prob).map_err(|e| e.to_string())?;
        gap = gap.max(max_abs_diff(&s.q, &o.q));
        sum_err = sum_err.max((s.q.iter().sum::<f64>() - 1.0).abs());
        kkt = kkt.max(kl_solver::kkt_residual(prob, &s.q, s.mu_star));
        zero_p += usize::from(prob.p().contains(&0.0));
        zero_a += usize::from(prob.a().contains(&0.0));
        tight += usize::from((prob.capacity() - 1.001).abs() < 1e-9);
    }
    let elapsed = start.elapsed();
    ensure(zero_p > 0 && zero_a > 0 && tight > 0, "corpus lacks edge cases")?;
    ensure(gap <= 1e-8, format!("max |q - q_oracle| = {gap:e}"))?;
    ensure(sum_err <= 1e-10, format!("max |sum q - 1| = {sum_err:e}"))?;
    ensure(kkt <= 1e-8, format!("max KKT residual = {kkt:e}"))?;
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 problems ({zero_p} with zero p, {zero_a} with zero a, {tight} with capacity 1.001): gap {gap:.1e}, sum err {sum_err:.1e}, KKT {kkt:.1e}, {elapsed:.2?}"
    ))
}

fn hand_worked_instance() -> Check {
    let prob = KlAllocProblem::new(&[0.6, 0.3, 0.1], &[1.0 / 3.0; 3], 0.5, &[0.5, 1.0, 1.0]).map_err(|e| e.to_string())?;
    let s = kl_solver::solve(&prob).map_err(|e| e.to_string())?;
    let mu_err = (s.mu_star - 25.0 / 9.0).abs();
    let q_err = max_abs_diff(&s.q, &[0.5, 0.5, 0.0]);
    ensure(s.initial_mu == 1.0, format!("initial mu {}", s.initial_mu))?;
    ensure(mu_err <= 1e-12 && q_err <= 1e-12, format!("mu err {mu_err:e}, q err {q_err:e}"))?;
    ensure(s.status == SolveStatus::ConvergedByNewton, format!("status {:?}", s.status))?;
    ensure(s.newton_steps() <= 3, format!("{} Newton steps", s.newton_steps()))?;
    Ok(format!("q = {:?}, mu* = {}, {} Newton steps from mu0 = 1", s.q, s.mu_star, s.newton_steps()))
}

fn lemma_one_property() -> Check {
    // half the probes uniform over (0, hi), half log-uniform around the root
    // where Q is not simply capped; only non-degenerate steps count
    let mut g = rng(3003);
    let (mut pairs, mut degenerate, mut violations) = (0, 0, 0);
    while pairs < 10_000 {
        let n = random_size(&mut g);
        let prob = random_problem(&mut g, n);
        let root = kl_solver::oracle_solve(&prob).map_err(|e| e.to_string())?.mu_star;
        let hi = prob.upper_bracket();
        for k in 0..10 {
            let mu = if k % 2 == 0 {
                g.random_range(0.0..hi)
            } else {
                (root * g.random_range(-3.0f64..3.0).exp()).min(hi)
            };
            if !(mu > 0.0 && mu < hi) {
                continue;
            }
            match prob.newton_step(mu) {
                NewtonStep::Degenerate { .. } => degenerate += 1,
                NewtonStep::Next(next) => {
                    pairs += 1;
                    let step = (next - mu).partial_cmp(&0.0);
                    let truth = (root - mu).partial_cmp(&0.0);
                    if step != truth {
                        violations += 1;
                    }
                }
            }
        }
    }
    ensure(violations == 0, format!("{violations} sign violations"))?;
    Ok(format!("{pairs} non-degenerate pairs, 0 violations ({degenerate} degenerate steps excluded)"))
}

fn termination_exactness() -> Check {
    let (mut by_newton, mut worst) = (0, 0.0f64);
    for prob in agreement_corpus() {
        let s = kl_solver::solve(prob).map_err(|e| e.to_string())?;
        if s.status == SolveStatus::ConvergedByNewton {
            by_newton += 1;
            worst = worst.max((prob.Q_value(s.mu_star) - 1.0).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max |Q(mu*) - 1| = {worst:e}"))?;
    Ok(format!("{by_newton} Newton-converged solves, max |Q(mu*) - 1| = {worst:.1e}"))
}

fn sweep_images() -> Vec<(String, Image, usize)> {
    let mut g = rng(5005);
    vec![
        ("flat".into(), synthetic::flat(32, 0.5), 32),
        ("checker-block".into(), synthetic::checker_block(32), 32),
        ("gradient".into(), synthetic::gradient(32), 32),
        ("random 100x75".into(), random_image(&mut g, 100, 75), 32),
        ("random 257x130".into(), random_image(&mut g, 257, 130), 32),
        ("random 90x61 B=16".into(), random_image(&mut g, 90, 61), 16),
    ]
}

fn conservation_and_caps() -> Check {
    let rates = [0.01, 0.04, 0.1, 0.25, 0.3, 0.4, 0.5];
    let curve = CurveParams::default();
    let mut plans = 0;
    for (name, img, b) in sweep_images() {
        let cap = (b * b) as u64;
        for &rate in &rates {
            let plan = single_stage_plan(&img, b, rate, &curve).map_err(|e| format!("{name}: {e}"))?;
            let expect = (rate * plan.padded_pixels() as f64).round() as u64;
            ensure(plan.total() == expect && plan.total_budget == expect, format!("{name} at {rate}: {} != {expect}", plan.total()))?;
            ensure(plan.per_block_m.iter().all(|&m| m <= cap), format!("{name} at {rate}: cap exceeded"))?;
            plans += 1;
        }
        let full = single_stage_plan(&img, b, 1.0, &curve).map_err(|e| format!("{name}: {e}"))?;
        ensure(full.per_block_m.iter().all(|&m| m == cap), format!("{name}: s_r = 1 not saturated"))?;
    }
    Ok(format!("{plans} plans conserve round(s_r * pixels) within caps; s_r = 1 saturates every block"))
}

fn curve_anchor() -> Check {
    let v = target_sparsity_ratio(0.01, &CurveParams::default()).map_err(|e| e.to_string())?;
    ensure(v == 0.005, format!("got {v:e}"))?;
    Ok("target ratio at 0.01 is exactly 0.005".into())
}

fn transform_and_operator_algebra() -> Check {
    let mut g = rng(7007);
    let mut orth = 0.0f64;
    let mut round_trip = 0.0f64;
    for b in [4, 8, 16, 32] {
        let c = Dct2::new(b);
        let m = c.matrix();
        for i in 0..b {
            for j in 0..b {
                let dot: f64 = (0..b).map(|k| m[i * b + k] * m[j * b + k]).sum();
                orth = orth.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        for _ in 0..50 {
            let v: Vec<f64> = (0..b * b).map(|_| g.random_range(0.0..1.0)).collect();
            let blk = Block::devectorize(b, v.clone()).map_err(|e| e.to_string())?;
            let back = idct2(&dct2(&blk));
            round_trip = round_trip.max(max_abs_diff(back.values(), &v));
        }
    }
    ensure(orth <= 1e-12, format!("DCT orthogonality {orth:e}"))?;
    ensure(round_trip <= 1e-10, format!("DCT round trip {round_trip:e}"))?;

    let op = operator32();
    let op_err = op.orthonormality_error();
    ensure(op_err <= 1e-9, format!("operator |AA^T - I| = {op_err:e}"))?;
    let mut pyth = 0.0f64;
    let small = [build_matrix(4, 1).map_err(|e| e.to_string())?, build_matrix(8, 1).map_err(|e| e.to_string())?];
    for m in small.iter().chain(std::iter::once(op)) {
        let dim = m.dim();
        for _ in 0..100 {
            let x: Vec<f64> = (0..dim).map(|_| g.random_range(-1.0..1.0)).collect();
            let start = g.random_range(1..=dim);
            let end = g.random_range(start - 1..=dim);
            let y = sample_rows(m, start, end, &x).map_err(|e| e.to_string())?;
            let xh = adjoint_reconstruct(m, start, end, &y).map_err(|e| e.to_string())?;
            let norm2 = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>();
            let resid: Vec<f64> = x.iter().zip(&xh).map(|(a, b)| a - b).collect();
            pyth = pyth.max((norm2(&x) - norm2(&xh) - norm2(&resid)).abs());
        }
    }
    ensure(pyth <= 1e-9, format!("Pythagoras gap {pyth:e}"))?;
    Ok(format!(
        "DCT orth {orth:.1e}, round trip {round_trip:.1e}; operator (B=32) {op_err:.1e}; Pythagoras {pyth:.1e}"
    ))
}

fn multistage_bookkeeping() -> Check {
    let op = operator32();
    let curve = CurveParams::default();
    let mut g = rng(8008);
    let images = [
        ("gradient", synthetic::gradient(32)),
        ("checker-block", synthetic::checker_block(32)),
        ("random 100x130", random_image(&mut g, 100, 130)),
    ];
    let predictors: [&dyn BoundsPredictor; 2] = [&OraclePredictor, &EnergyPredictor];
    let mut runs = 0;
    for (name, img) in &images {
        for rate in [0.1, 0.3] {
            let uni = uniform_plan(img, 32, rate).map_err(|e| e.to_string())?;
            let single = run_simulation(img, 32, rate, 1, &OraclePredictor, op, &curve).map_err(|e| e.to_string())?;
            ensure(single.final_m == uni.per_block_m, format!("{name} at {rate}: N = 1 differs from uniform"))?;
            let pixels = uni.padded_pixels();
            let target = (rate * pixels as f64).round() as i64;
            for stages in [2, 5, 8] {
                for pred in predictors {
                    let ctx = format!("{name}, s_r {rate}, N {stages}, {}", pred.name());
                    let plan = run_simulation(img, 32, rate, stages, pred, op, &curve).map_err(|e| format!("{ctx}: {e}"))?;
                    for s in &plan.stages {
                        let spent: u64 = s.stage_m.iter().sum();
                        ensure(spent == s.stage_budget, format!("{ctx}: stage {} spent {spent} of {}", s.stage_index, s.stage_budget))?;
                        ensure(
                            s.stage_budget == allocation::stage_budget(s.stage_rate, pixels),
                            format!("{ctx}: stage {} budget not round(s_r^t * pixels)", s.stage_index),
                        )?;
                    }
                    for rec in &plan.records {
                        ensure(rec.is_contiguous(), format!("{ctx}: block {} rows not contiguous", rec.block_index))?;
                        let mut next = 1;
                        for seg in &rec.segments {
                            ensure(seg.row_start == next, format!("{ctx}: gap in block {}", rec.block_index))?;
                            next = seg.row_end + 1;
                        }
                        ensure(
                            rec.measured_rows() as u64 == plan.final_m[rec.block_index],
                            format!("{ctx}: rows do not end at cumulative M"),
                        )?;
                    }
                    ensure(plan.final_m.iter().all(|&m| m <= 1024), format!("{ctx}: cumulative above B^2"))?;
                    let total = plan.total() as i64;
                    ensure((total - target).abs() <= stages as i64, format!("{ctx}: total {total} vs {target}"))?;
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} multi-stage runs consistent; N = 1 bit-identical to uniform"))
}

fn adaptive_benefit() -> Check {
    let start = Instant::now();
    let img = synthetic::checker_block(32);
    let op = build_matrix(32, 0).map_err(|e| e.to_string())?;
    let curve = CurveParams::default();
    let tex = synthetic::CHECKER_BLOCK_INDEX;
    let favours = |m: &[u64]| (0..m.len()).filter(|&i| i != tex).all(|i| m[tex] > m[i]);

    let uni = uniform_plan(&img, 32, 0.1).map_err(|e| e.to_string())?;
    let single = single_stage_plan(&img, 32, 0.1, &curve).map_err(|e| e.to_string())?;
    let multi = run_simulation(&img, 32, 0.1, 2, &OraclePredictor, &op, &curve).map_err(|e| e.to_string())?;
    ensure(favours(&single.per_block_m), format!("single-stage M = {:?}", single.per_block_m))?;
    ensure(favours(&multi.final_m), format!("2-stage M = {:?}", multi.final_m))?;

    // (b) is scored on the adjoint estimate A^T y itself; the [0, 1]-clamped
    // image PSNR is reported alongside
    let shape = |p: &allocation::AllocationPlan| GridShape { block_size: p.block_size, rows: p.rows, cols: p.cols };
    let scores = |plan: &allocation::AllocationPlan| -> Result<(f64, f64), String> {
        let recs = sensing::sample_plan(&img, plan, &op).map_err(|e| e.to_string())?;
        let blocks = sensing::reconstruct_blocks(&recs, &plan.per_block_m, shape(plan), &op).map_err(|e| e.to_string())?;
        let linear = sensing::linear_psnr(&img, &blocks, shape(plan)).map_err(|e| e.to_string())?;
        let out = sensing::reconstruct_plan(plan, &recs, &op, img.height(), img.width()).map_err(|e| e.to_string())?;
        Ok((linear, psnr(&img, &out).map_err(|e| e.to_string())?))
    };
    let (p_uni, c_uni) = scores(&uni)?;
    let (p_single, c_single) = scores(&single)?;
    let blocks = multi.reconstruct_blocks(&op).map_err(|e| e.to_string())?;
    let p_multi = sensing::linear_psnr(&img, &blocks, multi.shape()).map_err(|e| e.to_string())?;
    let out = multi.reconstruct(&op, img.height(), img.width()).map_err(|e| e.to_string())?;
    let c_multi = psnr(&img, &out).map_err(|e| e.to_string())?;
    ensure(p_single >= p_uni, format!("single-stage adjoint PSNR {p_single} < uniform {p_uni}"))?;
    ensure(p_multi >= p_uni, format!("2-stage adjoint PSNR {p_multi} < uniform {p_uni}"))?;

    let uni_m: Vec<f64> = uni.per_block_m.iter().map(|&m| m as f64).collect();
    let (_, kl_uni) = kl_diagnostic(&multi.true_bounds, &uni_m).map_err(|e| e.to_string())?;
    ensure(multi.final_kl <= kl_uni, format!("oracle KL {} > uniform KL {kl_uni}", multi.final_kl))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!(
        "textured M {} / {} vs flat max {}; adjoint PSNR uniform {p_uni:.2} dB, single {p_single:.2} dB, 2-stage {p_multi:.2} dB (clamped image: {c_uni:.2} / {c_single:.2} / {c_multi:.2} dB); KL oracle {:.4} <= uniform {kl_uni:.4}; {elapsed:.2?}",
        single.per_block_m[tex],
        multi.final_m[tex],
        multi.final_m.iter().enumerate().filter(|(i, _)| *i != tex).map(|(_, m)| *m).max().unwrap_or(0),
        multi.final_kl
    ))
}

fn solver_efficiency() -> Check {
    let mut g = rng(1010);
    let mut iters = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let prob = random_problem(&mut g, 1024);
        match kl_solver::solve(&prob) {
            Ok(s) => iters.push(s.iterations()),
            Err(KlError::IterationCap { iterations, .. }) => return Err(format!("iteration cap hit after {iterations}")),
            Err(e) => return Err(e.to_string()),
        }
    }
    iters.sort_unstable();
    let median = iters[iters.len() / 2];
    let max = *iters.last().unwrap_or(&0);
    ensure(median <= 30, format!("median iterations {median}"))?;
    Ok(format!("1000 problems at n = 1024: median {median} iterations, max {max}, cap never hit"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("solver-oracle equivalence", solver_oracle_equivalence),
        ("hand-worked instance", hand_worked_instance),
        ("Newton direction property", lemma_one_property),
        ("termination exactness", termination_exactness),
        ("conservation and caps", conservation_and_caps),
        ("curve anchor", curve_anchor),
        ("transform and operator algebra", transform_and_operator_algebra),
        ("multi-stage bookkeeping", multistage_bookkeeping),
        ("adaptive benefit", adaptive_benefit),
        ("solver robustness", solver_efficiency),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
