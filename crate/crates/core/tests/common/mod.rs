#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rate_alloc::{Image, KlAllocProblem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random feasible allocation problem of size `n`.
///
/// Roughly 15% of the weights are zero, roughly 15% of the caps are zero
/// (only when beta > 0, so the objective stays finite), and the usable
/// capacity is pinned to 1.001 for a third of the draws.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> KlAllocProblem {
    let mut p: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if p.iter().all(|v| *v == 0.0) {
        let i = rng.random_range(0..n);
        p[i] = 0.5;
    }
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let alpha = if rng.random_bool(0.1) { 1.0 } else { rng.random_range(0.05..0.95) };
    let mut a: Vec<f64> = (0..n)
        .map(|_| {
            if alpha < 1.0 && rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.1..1.0)
            }
        })
        .collect();
    let usable = |a: &[f64]| -> f64 { p.iter().zip(a).filter(|(w, _)| **w > 0.0).map(|(_, c)| c).sum() };
    if usable(&a) == 0.0 {
        let i = p.iter().position(|w| *w > 0.0).unwrap();
        a[i] = 1.0;
    }
    let target = match rng.random_range(0..3) {
        0 => 1.001,
        1 => rng.random_range(1.001..3.0),
        _ => usable(&a).max(1.001),
    };
    let scale = target / usable(&a);
    a.iter_mut().for_each(|c| *c *= scale);
    KlAllocProblem::new(&p, &r, alpha, &a).expect("generator yields feasible problems")
}

pub fn random_size(rng: &mut ChaCha8Rng) -> usize {
    if rng.random_bool(0.1) {
        rng.random_range(1..=4)
    } else {
        rng.random_range(1..=512)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smooth background plus a few textured patches.
pub fn random_image(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let fx = rng.random_range(0.5..3.0);
    let fy = rng.random_range(0.5..3.0);
    let mut px = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let smooth = 0.5 + 0.3 * ((r as f64 / height as f64 * fy).sin() * (c as f64 / width as f64 * fx).cos());
            px.push(smooth);
        }
    }
    for _ in 0..3 {
        let r0 = rng.random_range(0..height);
        let c0 = rng.random_range(0..width);
        for r in r0..(r0 + 12).min(height) {
            for c in c0..(c0 + 12).min(width) {
                px[r * width + c] = rng.random_range(0.0..1.0);
            }
        }
    }
    Image::from_clamped(height, width, px).unwrap()
}
