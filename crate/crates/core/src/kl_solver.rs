//! KL-divergence allocation program between sampling stages.
//!
//! Given a target ratio `p`, the ratio `r` already fixed by earlier stages,
//! mixing fractions `alpha + beta = 1` and caps `a`, find
//!
//! ```text
//! argmin_q  -sum_i p_i ln(alpha q_i + beta r_i)
//! s.t.      sum_i q_i = 1,  0 <= q_i <= a_i
//! ```
//!
//! The KKT conditions give `q_i = clamp(mu p_i - beta r_i / alpha, 0, a_i)`
//! for a scalar `mu > 0`, so solving reduces to the root of the
//! piecewise-linear, non-decreasing `Q(mu) = sum_i q_i(mu) = 1`. Newton steps
//! on `Q` are exact once the iterate lands in the root's linear piece; the
//! direction of every Newton step also tells which side of the root the
//! iterate is on, which gives a shrinking bracket and a bisection fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KlError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("infeasible problem: caps over positive-weight coordinates sum to {capacity} < 1")]
    Infeasible { capacity: f64 },
    #[error("objective undefined: alpha q_{index} + beta r_{index} = {value} with positive weight")]
    ObjectiveUndefined { index: usize, value: f64 },
    #[error("internal error: no root after {iterations} iterations (bracket [{lo}, {hi}])")]
    IterationCap { iterations: usize, lo: f64, hi: f64 },
}

/// One instance of the allocation program. `p` and `r` are stored
/// normalized; `beta` is always `1 - alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlAllocProblem {
    p: Vec<f64>,
    r: Vec<f64>,
    alpha: f64,
    beta: f64,
    a: Vec<f64>,
    // beta r_i / alpha
    shift: Vec<f64>,
}

fn normalized(name: &str, w: &[f64], strictly_positive: bool) -> Result<Vec<f64>, KlError> {
    for (i, &v) in w.iter().enumerate() {
        let ok = v.is_finite() && if strictly_positive { v > 0.0 } else { v >= 0.0 };
        if !ok {
            return Err(KlError::InvalidProblem(format!("{name}[{i}] = {v}")));
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(KlError::InvalidProblem(format!("{name} sums to {total}")));
    }
    Ok(w.iter().map(|v| v / total).collect())
}

impl KlAllocProblem {
    /// `p` and `r` may be given as unnormalized nonnegative weights; `r`
    /// must be strictly positive.
    pub fn new(p: &[f64], r: &[f64], alpha: f64, a: &[f64]) -> Result<Self, KlError> {
        let n = p.len();
        if n == 0 {
            return Err(KlError::InvalidProblem("empty problem".into()));
        }
        if r.len() != n || a.len() != n {
            return Err(KlError::InvalidProblem(format!(
                "length mismatch: p={}, r={}, a={}",
                n,
                r.len(),
                a.len()
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(KlError::InvalidProblem(format!("alpha = {alpha} outside (0, 1]")));
        }
        if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(KlError::InvalidProblem(format!("a[{i}] = {v}")));
        }
        let p = normalized("p", p, false)?;
        let r = normalized("r", r, true)?;
        let beta = 1.0 - alpha;
        let shift = r.iter().map(|ri| beta * ri / alpha).collect();
        let problem = Self {
            p,
            r,
            alpha,
            beta,
            a: a.to_vec(),
            shift,
        };
        let capacity = problem.capacity();
        if capacity < 1.0 {
            return Err(KlError::Infeasible { capacity });
        }
        Ok(problem)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    /// `sum a_i` over coordinates with positive weight; the largest value `Q` reaches.
    pub fn capacity(&self) -> f64 {
        self.p
            .iter()
            .zip(&self.a)
            .filter(|(p, _)| **p > 0.0)
            .map(|(_, a)| a)
            .sum()
    }

    /// Smallest `mu` at which every positive-weight coordinate is capped.
    pub fn upper_bracket(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.p[i] > 0.0)
            .map(|i| (self.a[i] + self.shift[i]) / self.p[i])
            .fold(0.0, f64::max)
    }

    fn segment_of(&self, i: usize, mu: f64) -> Segment {
        if self.p[i] == 0.0 {
            return Segment::Lower;
        }
        let v = mu * self.p[i] - self.shift[i];
        if v <= 0.0 {
            Segment::Lower
        } else if v >= self.a[i] {
            Segment::Upper
        } else {
            Segment::Center
        }
    }

    fn labels(&self, mu: f64) -> Vec<Segment> {
        (0..self.len()).map(|i| self.segment_of(i, mu)).collect()
    }

    fn q_i(&self, i: usize, mu: f64) -> f64 {
        match self.segment_of(i, mu) {
            Segment::Lower => 0.0,
            Segment::Upper => self.a[i],
            Segment::Center => mu * self.p[i] - self.shift[i],
        }
    }

    /// Componentwise `clamp(mu p_i - beta r_i / alpha, 0, a_i)`.
    pub fn q_of_mu(&self, mu: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.q_i(i, mu)).collect()
    }

    #[allow(non_snake_case)]
    pub fn Q_value(&self, mu: f64) -> f64 {
        (0..self.len()).map(|i| self.q_i(i, mu)).sum()
    }

    /// Slope of `Q` on the linear piece containing `mu`: the weight of the
    /// center set.
    #[allow(non_snake_case)]
    pub fn Q_derivative(&self, mu: f64) -> f64 {
        (0..self.len())
            .filter(|&i| self.segment_of(i, mu) == Segment::Center)
            .map(|i| self.p[i])
            .sum()
    }

    pub fn segment_sets(&self, mu: f64) -> SegmentSets {
        SegmentSets::from_labels(&self.labels(mu))
    }

    fn newton_from_labels(&self, labels: &[Segment]) -> NewtonStep {
        let mut numerator = 1.0;
        let mut denominator = 0.0;
        for (i, seg) in labels.iter().enumerate() {
            match seg {
                Segment::Center => {
                    numerator += self.shift[i];
                    denominator += self.p[i];
                }
                Segment::Upper => numerator -= self.a[i],
                Segment::Lower => {}
            }
        }
        if denominator > 0.0 && numerator > 0.0 {
            NewtonStep::Next(numerator / denominator)
        } else {
            NewtonStep::Degenerate {
                numerator,
                denominator,
            }
        }
    }

    /// `(1 + sum_c beta r_i / alpha - sum_u a_i) / sum_c p_i`, the root of the
    /// linear piece through `mu`.
    pub fn newton_step(&self, mu: f64) -> NewtonStep {
        self.newton_from_labels(&self.labels(mu))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Lower,
    Center,
    Upper,
}

/// Partition of the coordinates by where `q_i(mu)` sits. Boundary values
/// go to `lower`/`upper`, never `center`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSets {
    pub lower: Vec<usize>,
    pub center: Vec<usize>,
    pub upper: Vec<usize>,
}

impl SegmentSets {
    fn from_labels(labels: &[Segment]) -> Self {
        let mut sets = Self {
            lower: Vec::new(),
            center: Vec::new(),
            upper: Vec::new(),
        };
        for (i, s) in labels.iter().enumerate() {
            match s {
                Segment::Lower => sets.lower.push(i),
                Segment::Center => sets.center.push(i),
                Segment::Upper => sets.upper.push(i),
            }
        }
        sets
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NewtonStep {
    Next(f64),
    /// Empty center set or a nonpositive numerator; no usable step.
    Degenerate { numerator: f64, denominator: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Newton,
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub mu: f64,
    pub kind: StepKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    ConvergedByNewton,
    ConvergedWithBisection,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::ConvergedByNewton => "converged_by_newton",
            SolveStatus::ConvergedWithBisection => "converged_with_bisection",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlAllocSolution {
    pub q: Vec<f64>,
    pub mu_star: f64,
    pub segments: SegmentSets,
    pub initial_mu: f64,
    /// Iterates after `initial_mu`, in order.
    pub trace: Vec<TraceStep>,
    pub status: SolveStatus,
}

impl KlAllocSolution {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn newton_steps(&self) -> usize {
        self.trace.iter().filter(|s| s.kind == StepKind::Newton).count()
    }

    fn finish(problem: &KlAllocProblem, mu: f64, initial_mu: f64, trace: Vec<TraceStep>) -> Self {
        let status = if trace.iter().any(|s| s.kind == StepKind::Bisection) {
            SolveStatus::ConvergedWithBisection
        } else {
            SolveStatus::ConvergedByNewton
        };
        Self {
            q: problem.q_of_mu(mu),
            mu_star: mu,
            segments: problem.segment_sets(mu),
            initial_mu,
            trace,
            status,
        }
    }
}

/// Accepts an iterate whose `Q` is this close to 1 even if its segment sets
/// differ from the previous iterate's. Only matters when the root sits on a
/// breakpoint and rounding flips one coordinate's classification.
const ROOT_TOLERANCE: f64 = 1e-13;

/// Newton iteration on `Q(mu) = 1` with bracket tracking and bisection
/// fallback.
///
/// Every Newton step from `mu` moves toward the root, so `mu < next` proves
/// `mu` is a lower bound and `mu > next` an upper bound. Steps that leave the
/// current bracket, and degenerate steps, are replaced by the bracket
/// midpoint. Iteration stops when a Newton step stays inside the linear
/// piece it started from.
pub fn solve(problem: &KlAllocProblem) -> Result<KlAllocSolution, KlError> {
    let capacity = problem.capacity();
    if capacity < 1.0 {
        return Err(KlError::Infeasible { capacity });
    }
    let mut lo = 0.0f64;
    let mut hi = problem.upper_bracket();
    let eps = 1e-12 * hi;
    let mut mu = if problem.beta == 0.0 {
        0.5 * hi
    } else {
        (problem.beta / problem.alpha).max(lo + eps).min(hi - eps)
    };
    let initial_mu = mu;
    let mut trace = Vec::new();
    let cap = 10 * problem.len() + 100;

    while trace.len() < cap {
        let labels = problem.labels(mu);
        match problem.newton_from_labels(&labels) {
            NewtonStep::Next(next) => {
                if mu < next {
                    lo = lo.max(mu);
                } else if mu > next {
                    hi = hi.min(mu);
                } else {
                    trace.push(TraceStep { mu: next, kind: StepKind::Newton });
                    return Ok(KlAllocSolution::finish(problem, next, initial_mu, trace));
                }
                if next >= lo && next <= hi {
                    let lands = problem.labels(next) == labels
                        || (problem.Q_value(next) - 1.0).abs() <= ROOT_TOLERANCE;
                    if lands {
                        trace.push(TraceStep { mu: next, kind: StepKind::Newton });
                        return Ok(KlAllocSolution::finish(problem, next, initial_mu, trace));
                    }
                    if next > lo && next < hi {
                        trace.push(TraceStep { mu: next, kind: StepKind::Newton });
                        mu = next;
                        continue;
                    }
                }
            }
            NewtonStep::Degenerate { .. } => {
                // Q is flat here; its value says which side of the root we are on.
                let q = problem.Q_value(mu);
                if (q - 1.0).abs() <= ROOT_TOLERANCE {
                    return Ok(KlAllocSolution::finish(problem, mu, initial_mu, trace));
                }
                if q < 1.0 {
                    lo = lo.max(mu);
                } else {
                    hi = hi.min(mu);
                }
            }
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket exhausted at double precision
            let best = if (problem.Q_value(lo) - 1.0).abs() <= (problem.Q_value(hi) - 1.0).abs() {
                lo
            } else {
                hi
            };
            trace.push(TraceStep { mu: best, kind: StepKind::Bisection });
            return Ok(KlAllocSolution::finish(problem, best, initial_mu, trace));
        }
        trace.push(TraceStep { mu: mid, kind: StepKind::Bisection });
        mu = mid;
    }
    Err(KlError::IterationCap {
        iterations: trace.len(),
        lo,
        hi,
    })
}

/// Plain bisection on `sign(Q(mu) - 1)` over `[0, upper_bracket]`, 200
/// halvings. Independent of the Newton machinery; used for verification.
pub fn oracle_solve(problem: &KlAllocProblem) -> Result<KlAllocSolution, KlError> {
    let capacity = problem.capacity();
    if capacity < 1.0 {
        return Err(KlError::Infeasible { capacity });
    }
    let mut lo = 0.0;
    let mut hi = problem.upper_bracket();
    let initial_mu = 0.5 * hi;
    let mut trace = Vec::with_capacity(200);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let q: f64 = problem.q_of_mu(mid).iter().sum();
        if q < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        trace.push(TraceStep { mu: mid, kind: StepKind::Bisection });
    }
    let mut solution = KlAllocSolution::finish(problem, hi, initial_mu, trace);
    solution.status = SolveStatus::ConvergedWithBisection;
    Ok(solution)
}

/// `-sum_i p_i ln(alpha q_i + beta r_i)`; zero-weight terms contribute 0.
pub fn objective(problem: &KlAllocProblem, q: &[f64]) -> Result<f64, KlError> {
    let mut total = 0.0;
    for (i, &qi) in q.iter().enumerate() {
        let p = problem.p[i];
        if p == 0.0 {
            continue;
        }
        let mix = problem.alpha * qi + problem.beta * problem.r[i];
        if !(mix > 0.0) {
            return Err(KlError::ObjectiveUndefined { index: i, value: mix });
        }
        total -= p * mix.ln();
    }
    Ok(total)
}

/// Largest violation of the KKT system at `(q, nu = 1 / mu_star)`.
///
/// Multipliers are reconstructed from stationarity: at a lower bound
/// `lambda_i = max(nu - g_i, 0)`, at an upper bound `pi_i = max(g_i - nu, 0)`
/// with `g_i = alpha p_i / (alpha q_i + beta r_i)`. The residual is the max of
/// stationarity violations, complementary-slackness products, primal
/// infeasibility and `|sum q - 1|`.
pub fn kkt_residual(problem: &KlAllocProblem, q: &[f64], mu_star: f64) -> f64 {
    if q.len() != problem.len() || !(mu_star > 0.0) {
        return f64::INFINITY;
    }
    let nu = 1.0 / mu_star;
    let mut worst: f64 = (q.iter().sum::<f64>() - 1.0).abs();
    for (i, &qi) in q.iter().enumerate() {
        let a = problem.a[i];
        worst = worst.max((-qi).max(0.0)).max((qi - a).max(0.0));
        let mix = problem.alpha * qi + problem.beta * problem.r[i];
        let g = if problem.p[i] == 0.0 {
            0.0
        } else if mix > 0.0 {
            problem.alpha * problem.p[i] / mix
        } else {
            return f64::INFINITY;
        };
        let lambda = if qi <= 0.0 { (nu - g).max(0.0) } else { 0.0 };
        let pi = if qi >= a { (g - nu).max(0.0) } else { 0.0 };
        let stationarity = (-g - lambda + pi + nu).abs();
        let slackness = (lambda * qi).abs().max((pi * (qi - a)).abs());
        worst = worst.max(stationarity).max(slackness);
    }
    worst
}

/// JSON shape of a problem: `{"p": [...], "r": [...], "alpha": x, "a": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub alpha: f64,
    pub a: Vec<f64>,
}

impl TryFrom<&ProblemSpec> for KlAllocProblem {
    type Error = KlError;

    fn try_from(spec: &ProblemSpec) -> Result<Self, KlError> {
        KlAllocProblem::new(&spec.p, &spec.r, spec.alpha, &spec.a)
    }
}

impl From<&KlAllocProblem> for ProblemSpec {
    fn from(problem: &KlAllocProblem) -> Self {
        Self {
            p: problem.p.clone(),
            r: problem.r.clone(),
            alpha: problem.alpha,
            a: problem.a.clone(),
        }
    }
}

/// JSON shape of a solution: `{"q": [...], "mu": x, "status": "...", "iterations": k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub q: Vec<f64>,
    pub mu: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl From<&KlAllocSolution> for SolutionReport {
    fn from(s: &KlAllocSolution) -> Self {
        Self {
            q: s.q.clone(),
            mu: s.mu_star,
            status: s.status,
            iterations: s.iterations(),
        }
    }
}
