//! Draft-slot allocation under the verifier's per-round token budget.
//!
//! The gradient scheduler maximizes `sum_i w_i * mu(alpha_i, S_i)` subject to
//! `sum_i S_i <= C`, where `w_i` is the utility gradient at the client's smoothed
//! goodput. Each objective term is separable and concave in `S_i` (the marginal gain
//! of the `(s+1)`-th slot is `w_i * alpha_i^(s+1)`, strictly decreasing in `s`), so
//! handing out slots one at a time to the largest marginal gain is optimal.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::expected_goodput_unchecked;

/// Largest client count accepted by the exhaustive routines.
pub const ENUM_MAX_CLIENTS: usize = 6;
/// Largest capacity accepted by the exhaustive routines.
pub const ENUM_MAX_CAPACITY: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Goodspeed,
    Fixed,
    Random,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Goodspeed => "goodspeed",
            SchedulerKind::Fixed => "fixed",
            SchedulerKind::Random => "random",
        }
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Draft-token allocation `(S_1, ..., S_N)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub slots: Vec<u32>,
}

impl ScheduleDecision {
    pub fn new(slots: Vec<u32>) -> Self {
        Self { slots }
    }

    pub fn zeros(clients: usize) -> Self {
        Self {
            slots: vec![0; clients],
        }
    }

    pub fn total(&self) -> u64 {
        self.slots.iter().map(|&s| s as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn check_budget(&self, capacity: u32) -> Result<()> {
        let used = self.total();
        if used > capacity as u64 {
            return Err(Error::BudgetViolation { used, capacity });
        }
        Ok(())
    }
}

/// Gradient weights, acceptance estimates and the budget for one scheduling call.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerInput {
    weights: Vec<f64>,
    alphas: Vec<f64>,
    capacity: u32,
}

impl SchedulerInput {
    pub fn new(weights: Vec<f64>, alphas: Vec<f64>, capacity: u32) -> Result<Self> {
        if weights.is_empty() || weights.len() != alphas.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} acceptance rates",
                weights.len(),
                alphas.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidInput(format!("weight {w} must be finite and positive")));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidInput(format!("acceptance rate {a} outside (0, 1)")));
        }
        Ok(Self {
            weights,
            alphas,
            capacity,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn clients(&self) -> usize {
        self.weights.len()
    }

    /// `sum_i w_i * mu(alpha_i, S_i)`.
    pub fn objective(&self, decision: &ScheduleDecision) -> f64 {
        self.weights
            .iter()
            .zip(&self.alphas)
            .zip(&decision.slots)
            .map(|((w, a), s)| w * expected_goodput_unchecked(*a, *s))
            .sum()
    }

    fn check_guard(&self) -> Result<()> {
        if self.clients() > ENUM_MAX_CLIENTS || self.capacity > ENUM_MAX_CAPACITY {
            return Err(size_error(self.clients(), self.capacity));
        }
        Ok(())
    }
}

fn size_error(clients: usize, capacity: u32) -> Error {
    Error::SizeGuard {
        clients,
        capacity,
        max_clients: ENUM_MAX_CLIENTS,
        max_capacity: ENUM_MAX_CAPACITY,
    }
}

/// Allocation together with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled {
    pub decision: ScheduleDecision,
    pub objective: f64,
}

/// `sum_i log x_i`.
pub fn utility_log(x: &[f64]) -> Result<f64> {
    if let Some(v) = x.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!("log utility of non-positive goodput {v}")));
    }
    Ok(x.iter().map(|v| v.ln()).sum())
}

/// Componentwise `1 / x_i`.
pub fn gradient_log(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1.0 / v).collect()
}

#[derive(Debug, PartialEq)]
struct Candidate {
    gain: f64,
    client: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Larger gain first; among equal gains the lower index wins.
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| Reverse(self.client).cmp(&Reverse(other.client)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves the gradient scheduling problem by greedy marginal-gain allocation.
pub fn goodspeed_schedule(input: &SchedulerInput) -> Scheduled {
    let n = input.clients();
    let mut slots = vec![0u32; n];
    let mut heap: BinaryHeap<Candidate> = (0..n)
        .map(|i| Candidate {
            gain: input.weights[i] * input.alphas[i],
            client: i,
        })
        .collect();
    for _ in 0..input.capacity {
        let Some(best) = heap.pop() else { break };
        if best.gain <= 0.0 {
            break;
        }
        let i = best.client;
        slots[i] += 1;
        heap.push(Candidate {
            gain: input.weights[i] * input.alphas[i].powi(slots[i] as i32 + 1),
            client: i,
        });
    }
    let decision = ScheduleDecision::new(slots);
    let objective = input.objective(&decision);
    Scheduled { decision, objective }
}

/// Exhaustive maximizer over every feasible allocation; ties go to the
/// lexicographically smallest allocation.
pub fn brute_force_schedule(input: &SchedulerInput) -> Result<Scheduled> {
    input.check_guard()?;
    let mut best: Option<Scheduled> = None;
    for decision in enumerate_decisions(input.clients(), input.capacity)? {
        let objective = input.objective(&decision);
        if best.as_ref().is_none_or(|b| objective > b.objective) {
            best = Some(Scheduled { decision, objective });
        }
    }
    Ok(best.expect("the all-zero allocation is always feasible"))
}

/// Every allocation with `sum S_i <= capacity`, in lexicographic order.
pub fn enumerate_decisions(clients: usize, capacity: u32) -> Result<Vec<ScheduleDecision>> {
    if clients == 0 {
        return Err(Error::InvalidInput("at least one client is required".into()));
    }
    if clients > ENUM_MAX_CLIENTS || capacity > ENUM_MAX_CAPACITY {
        return Err(size_error(clients, capacity));
    }
    let mut out = Vec::new();
    let mut current = vec![0u32; clients];
    fill(&mut out, &mut current, 0, capacity);
    Ok(out)
}

fn fill(out: &mut Vec<ScheduleDecision>, current: &mut [u32], pos: usize, remaining: u32) {
    if pos == current.len() {
        out.push(ScheduleDecision::new(current.to_vec()));
        return;
    }
    for s in 0..=remaining {
        current[pos] = s;
        fill(out, current, pos + 1, remaining - s);
    }
    current[pos] = 0;
}

/// Uniform split: `floor(C / N)` each, remainder one apiece to the lowest indices.
pub fn fixed_schedule(clients: usize, capacity: u32) -> ScheduleDecision {
    assert!(clients >= 1, "fixed_schedule needs at least one client");
    let base = capacity / clients as u32;
    let extra = (capacity % clients as u32) as usize;
    ScheduleDecision::new((0..clients).map(|i| base + u32::from(i < extra)).collect())
}

/// Uniformly random composition of `capacity` into `clients` non-negative parts.
pub fn random_schedule<R: Rng + ?Sized>(clients: usize, capacity: u32, rng: &mut R) -> ScheduleDecision {
    assert!(clients >= 1, "random_schedule needs at least one client");
    if clients == 1 {
        return ScheduleDecision::new(vec![capacity]);
    }
    // Stars and bars: choose the N - 1 bar positions among C + N - 1 cells.
    let cells = capacity as usize + clients - 1;
    let mut bars = index::sample(rng, cells, clients - 1).into_vec();
    bars.sort_unstable();
    let mut slots = Vec::with_capacity(clients);
    let mut prev = 0usize;
    for &b in &bars {
        slots.push((b - prev) as u32);
        prev = b + 1;
    }
    slots.push((cells - prev) as u32);
    ScheduleDecision::new(slots)
}
