//! Proportional-fair optimum over the achievable goodput region.
//!
//! The region is the convex hull of the expected-goodput vectors `mu(k)` of every
//! feasible allocation `k`. Maximizing `sum_i log x_i` over it is a smooth concave
//! program whose linear-maximization step is exactly the gradient scheduler, so the
//! Frank-Wolfe solver here reuses [`goodspeed_schedule`] as its vertex oracle.
//!
//! [`small_instance_optimum`] solves the same problem by a different route (explicit
//! mixture weights over an enumerated vertex set, accelerated projected gradient on
//! the simplex) and serves as a cross-check.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{expected_goodput_unchecked, ALPHA_MAX};
use crate::rng::{stream, substream};
use crate::scheduler::{
    enumerate_decisions, fixed_schedule, goodspeed_schedule, gradient_log, utility_log, ScheduleDecision,
    SchedulerInput,
};

pub const DEFAULT_GAP_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: u64 = 100_000;

/// A goodput vector, optionally carrying the Frank-Wolfe gap at that point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodputPoint {
    pub values: Vec<f64>,
    pub fw_gap: f64,
}

impl GoodputPoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, fw_gap: 0.0 }
    }

    pub fn utility(&self) -> f64 {
        utility_log(&self.values).expect("goodput points are positive")
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Long-run acceptance rates and verifier capacity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSpec {
    alphas: Vec<f64>,
    capacity: u32,
}

impl RegionSpec {
    pub fn new(alphas: Vec<f64>, capacity: u32) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidInput("region needs at least one client".into()));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidInput(format!("acceptance rate {a} outside (0, 1)")));
        }
        if capacity == 0 {
            return Err(Error::InvalidInput("capacity must be at least 1".into()));
        }
        Ok(Self { alphas, capacity })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn clients(&self) -> usize {
        self.alphas.len()
    }

    /// Upper non-degeneracy bound on any coordinate of the region.
    pub fn upper_bound(&self) -> f64 {
        expected_goodput_unchecked(ALPHA_MAX, self.capacity)
    }

    fn vertex_values(&self, decision: &ScheduleDecision) -> Vec<f64> {
        self.alphas
            .iter()
            .zip(&decision.slots)
            .map(|(a, s)| expected_goodput_unchecked(*a, *s))
            .collect()
    }
}

/// `mu(k)`: expected goodput of allocation `decision`.
pub fn goodput_vertex(decision: &ScheduleDecision, region: &RegionSpec) -> Result<GoodputPoint> {
    if decision.len() != region.clients() {
        return Err(Error::InvalidInput(format!(
            "allocation for {} clients in a region of {}",
            decision.len(),
            region.clients()
        )));
    }
    decision.check_budget(region.capacity)?;
    Ok(GoodputPoint::new(region.vertex_values(decision)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `2 / (k + 2)` with no line search.
    OpenLoop,
    /// Away steps with exact line search; converges linearly on this problem.
    AwayStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FwOptions {
    pub max_iters: u64,
    pub gap_tol: f64,
    pub step: StepRule,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            gap_tol: DEFAULT_GAP_TOL,
            step: StepRule::AwayStep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FwSolution {
    pub point: GoodputPoint,
    pub utility: f64,
    pub iterations: u64,
    pub converged: bool,
}

struct Atom {
    decision: ScheduleDecision,
    values: Vec<f64>,
    weight: f64,
}

/// Frank-Wolfe with the default options except for the given limits.
pub fn solve_optimal_goodput(region: &RegionSpec, max_iters: u64, gap_tol: f64) -> FwSolution {
    solve_with(
        region,
        &FwOptions {
            max_iters,
            gap_tol,
            ..FwOptions::default()
        },
    )
}

pub fn solve_with(region: &RegionSpec, opts: &FwOptions) -> FwSolution {
    let start = fixed_schedule(region.clients(), region.capacity);
    let mut active = vec![Atom {
        values: region.vertex_values(&start),
        decision: start,
        weight: 1.0,
    }];
    let mut x = active[0].values.clone();
    let mut iterations = 0;
    let mut gap;

    loop {
        let grad = gradient_log(&x);
        let vertex = linear_oracle(region, &grad);
        let vertex_values = region.vertex_values(&vertex);
        gap = dot(&grad, &vertex_values) - dot(&grad, &x);
        if gap <= opts.gap_tol || iterations >= opts.max_iters {
            break;
        }
        iterations += 1;

        match opts.step {
            StepRule::OpenLoop => {
                let gamma = 2.0 / (iterations as f64 + 1.0);
                move_toward(&mut active, vertex, vertex_values, gamma);
            }
            StepRule::AwayStep => {
                let (away_idx, away_gap) = active
                    .iter()
                    .enumerate()
                    .map(|(k, a)| (k, dot(&grad, &x) - dot(&grad, &a.values)))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("active set is never empty");
                let away_weight = active[away_idx].weight;
                if gap >= away_gap || away_weight >= 1.0 {
                    let dir: Vec<f64> = vertex_values.iter().zip(&x).map(|(v, xi)| v - xi).collect();
                    let gamma = line_search(&x, &dir, 1.0);
                    move_toward(&mut active, vertex, vertex_values, gamma);
                } else {
                    let gamma_max = away_weight / (1.0 - away_weight);
                    let dir: Vec<f64> = x.iter().zip(&active[away_idx].values).map(|(xi, a)| xi - a).collect();
                    let gamma = line_search(&x, &dir, gamma_max);
                    for atom in active.iter_mut() {
                        atom.weight *= 1.0 + gamma;
                    }
                    active[away_idx].weight -= gamma;
                    if gamma >= gamma_max || active[away_idx].weight <= 1e-15 {
                        active.swap_remove(away_idx);
                        renormalize(&mut active);
                    }
                }
            }
        }
        x = combine(&active, region.clients());
    }

    let point = GoodputPoint {
        values: x,
        fw_gap: gap.max(0.0),
    };
    FwSolution {
        utility: point.utility(),
        converged: gap <= opts.gap_tol,
        point,
        iterations,
    }
}

fn linear_oracle(region: &RegionSpec, grad: &[f64]) -> ScheduleDecision {
    let input = SchedulerInput::new(grad.to_vec(), region.alphas.clone(), region.capacity)
        .expect("gradients of a point inside the region are finite and positive");
    goodspeed_schedule(&input).decision
}

fn move_toward(active: &mut Vec<Atom>, decision: ScheduleDecision, values: Vec<f64>, gamma: f64) {
    if gamma >= 1.0 {
        active.clear();
        active.push(Atom {
            decision,
            values,
            weight: 1.0,
        });
        return;
    }
    for atom in active.iter_mut() {
        atom.weight *= 1.0 - gamma;
    }
    match active.iter_mut().find(|a| a.decision == decision) {
        Some(atom) => atom.weight += gamma,
        None => active.push(Atom {
            decision,
            values,
            weight: gamma,
        }),
    }
}

fn renormalize(active: &mut [Atom]) {
    let total: f64 = active.iter().map(|a| a.weight).sum();
    for atom in active.iter_mut() {
        atom.weight /= total;
    }
}

fn combine(active: &[Atom], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for atom in active {
        for (xi, v) in x.iter_mut().zip(&atom.values) {
            *xi += atom.weight * v;
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `sum_i log(x_i + gamma d_i)` over `[0, gamma_max]`.
fn line_search(x: &[f64], d: &[f64], gamma_max: f64) -> f64 {
    let slope = |g: f64| -> f64 { x.iter().zip(d).map(|(xi, di)| di / (xi + g * di)).sum() };
    if slope(gamma_max) >= 0.0 {
        return gamma_max;
    }
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, gamma_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * gamma_max.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Optimum found by explicit mixture weights, with the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSolution {
    pub point: GoodputPoint,
    pub utility: f64,
    /// Allocations with non-negligible probability and their weights.
    pub mixture: Vec<(ScheduleDecision, f64)>,
}

/// Maximizes `sum_i log x_i` over `x = sum_k phi(k) mu(k)` by accelerated projected
/// gradient ascent on the simplex of `phi`, restarted `restarts` times (uniform
/// start first, then seeded random starts). Returns the best result.
pub fn small_instance_optimum(region: &RegionSpec, restarts: usize) -> Result<MixtureSolution> {
    let decisions = enumerate_decisions(region.clients(), region.capacity)?;
    let vertices: Vec<Vec<f64>> = decisions.iter().map(|d| region.vertex_values(d)).collect();
    let k = vertices.len();
    let mut rng = substream(0, stream::ORACLE);

    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            vec![1.0 / k as f64; k]
        } else {
            let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect()
        };
        let (value, phi) = simplex_ascent(&vertices, start);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, phi));
        }
    }
    let (utility, phi) = best.expect("at least one restart");
    let values = mix(&vertices, &phi);
    let mixture = decisions.into_iter().zip(phi).filter(|(_, w)| *w > 1e-9).collect();
    Ok(MixtureSolution {
        point: GoodputPoint::new(values),
        utility,
        mixture,
    })
}

fn mix(vertices: &[Vec<f64>], phi: &[f64]) -> Vec<f64> {
    let n = vertices[0].len();
    let mut x = vec![0.0; n];
    for (v, w) in vertices.iter().zip(phi) {
        if *w != 0.0 {
            for (xi, vi) in x.iter_mut().zip(v) {
                *xi += w * vi;
            }
        }
    }
    x
}

fn mixture_utility(vertices: &[Vec<f64>], phi: &[f64]) -> f64 {
    mix(vertices, phi).iter().map(|v| v.ln()).sum()
}

fn simplex_ascent(vertices: &[Vec<f64>], start: Vec<f64>) -> (f64, Vec<f64>) {
    const MAX_ITERS: usize = 4000;
    let mut phi = start;
    let mut f_phi = mixture_utility(vertices, &phi);
    let mut y = phi.clone();
    let mut momentum = 1.0f64;
    let mut step = 1.0f64;

    for _ in 0..MAX_ITERS {
        let x = mix(vertices, &y);
        let f_y: f64 = x.iter().map(|v| v.ln()).sum();
        let inv: Vec<f64> = x.iter().map(|v| 1.0 / v).collect();
        let grad: Vec<f64> = vertices.iter().map(|v| dot(v, &inv)).collect();

        // Backtracking on the quadratic lower model of the concave objective.
        let (candidate, f_candidate) = loop {
            let trial: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            let cand = project_simplex(&trial);
            let diff: Vec<f64> = cand.iter().zip(&y).map(|(c, a)| c - a).collect();
            let f_c = mixture_utility(vertices, &cand);
            let model = f_y + dot(&grad, &diff) - dot(&diff, &diff) / (2.0 * step);
            if f_c.is_finite() && f_c >= model - 1e-15 {
                break (cand, f_c);
            }
            step *= 0.5;
            if step < 1e-20 {
                break (y.clone(), f_y);
            }
        };

        if f_candidate < f_phi {
            // Function-value restart of the momentum sequence.
            momentum = 1.0;
            y = phi.clone();
            continue;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        let moved: f64 = candidate.iter().zip(&phi).map(|(a, b)| (a - b).abs()).sum();
        y = candidate.iter().zip(&phi).map(|(c, p)| c + beta * (c - p)).collect();
        let improvement = f_candidate - f_phi;
        phi = candidate;
        f_phi = f_candidate;
        momentum = next_momentum;
        step *= 1.25;
        if moved < 1e-13 && improvement < 1e-15 {
            break;
        }
    }
    (f_phi, phi)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}
