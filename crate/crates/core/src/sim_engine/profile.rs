//! Acceptance-rate trajectories `alpha_i(t)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, substream, SimRng};
use crate::token_model::TokenModelPair;

/// Bounds on every abstract acceptance level a random walk may visit.
pub const WALK_MIN: f64 = 0.05;
pub const WALK_MAX: f64 = 0.95;
/// Largest abstract stationary or piecewise level.
pub const LEVEL_MAX: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub enum AcceptanceProfile {
    /// Exact speculative decoding with one draft/target pair per client.
    TokenModel { pairs: Vec<TokenModelPair> },
    /// Constant `alpha_i`.
    Stationary { levels: Vec<f64> },
    /// `levels[i][k]` is active from `switch_times[k - 1]` (inclusive) up to
    /// `switch_times[k]` (exclusive).
    Piecewise {
        levels: Vec<Vec<f64>>,
        switch_times: Vec<u64>,
    },
    /// Reflected walk with increments uniform on `[-step, step]`.
    RandomWalk {
        start: Vec<f64>,
        step: f64,
        lower: f64,
        upper: f64,
    },
}

fn check_level(key: &str, v: f64) -> Result<()> {
    if !(0.0..=LEVEL_MAX).contains(&v) {
        return Err(Error::InvalidParameter(format!(
            "{key} level {v} outside [0, {LEVEL_MAX}]"
        )));
    }
    Ok(())
}

impl AcceptanceProfile {
    pub fn clients(&self) -> usize {
        match self {
            AcceptanceProfile::TokenModel { pairs } => pairs.len(),
            AcceptanceProfile::Stationary { levels } => levels.len(),
            AcceptanceProfile::Piecewise { levels, .. } => levels.len(),
            AcceptanceProfile::RandomWalk { start, .. } => start.len(),
        }
    }

    pub fn is_token_model(&self) -> bool {
        matches!(self, AcceptanceProfile::TokenModel { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients() == 0 {
            return Err(Error::InvalidParameter("profile describes no clients".into()));
        }
        match self {
            AcceptanceProfile::TokenModel { .. } => {}
            AcceptanceProfile::Stationary { levels } => {
                for &v in levels {
                    check_level("stationary", v)?;
                }
            }
            AcceptanceProfile::Piecewise { levels, switch_times } => {
                if switch_times.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParameter(
                        "piecewise switch times must be strictly increasing".into(),
                    ));
                }
                for row in levels {
                    if row.len() != switch_times.len() + 1 {
                        return Err(Error::InvalidParameter(format!(
                            "piecewise client has {} levels for {} switch times",
                            row.len(),
                            switch_times.len()
                        )));
                    }
                    for &v in row {
                        check_level("piecewise", v)?;
                    }
                }
            }
            AcceptanceProfile::RandomWalk {
                start,
                step,
                lower,
                upper,
            } => {
                if !(WALK_MIN <= *lower && lower < upper && *upper <= WALK_MAX) {
                    return Err(Error::InvalidParameter(format!(
                        "random-walk bounds [{lower}, {upper}] must nest inside [{WALK_MIN}, {WALK_MAX}]"
                    )));
                }
                if !(*step > 0.0 && *step <= upper - lower) {
                    return Err(Error::InvalidParameter(format!(
                        "random-walk step {step} must lie in (0, upper - lower]"
                    )));
                }
                if let Some(s) = start.iter().find(|s| !(lower..=upper).contains(s)) {
                    return Err(Error::InvalidParameter(format!(
                        "random-walk start {s} outside [{lower}, {upper}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Limit of the time-averaged acceptance rate of `client`.
    pub fn long_run_alpha(&self, client: usize) -> f64 {
        match self {
            AcceptanceProfile::TokenModel { pairs } => pairs[client].long_run_acceptance(),
            AcceptanceProfile::Stationary { levels } => levels[client],
            AcceptanceProfile::Piecewise { levels, .. } => *levels[client].last().expect("validated"),
            // uniform stationary law of a reflected symmetric walk
            AcceptanceProfile::RandomWalk { lower, upper, .. } => 0.5 * (lower + upper),
        }
    }

    pub fn long_run_alphas(&self) -> Vec<f64> {
        (0..self.clients()).map(|i| self.long_run_alpha(i)).collect()
    }
}

/// Evaluates `alpha_i(t)` for a profile, caching random-walk paths.
///
/// Walk increments come from a per-client substream of the master seed, so the
/// path does not depend on how often or in which order it is queried.
#[derive(Debug, Clone)]
pub struct AlphaTracker {
    profile: AcceptanceProfile,
    walks: Vec<WalkPath>,
}

#[derive(Debug, Clone)]
struct WalkPath {
    values: Vec<f64>,
    rng: SimRng,
}

impl AlphaTracker {
    pub fn new(profile: AcceptanceProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let walks = match &profile {
            AcceptanceProfile::RandomWalk { start, .. } => start
                .iter()
                .enumerate()
                .map(|(i, &s)| WalkPath {
                    values: vec![s],
                    rng: substream(seed, stream::PROFILE_BASE + i as u64),
                })
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self { profile, walks })
    }

    pub fn profile(&self) -> &AcceptanceProfile {
        &self.profile
    }

    /// Acceptance rate of `client` at round `t`. Token-model profiles report the
    /// long-run rate; per-context rates come from the engine.
    pub fn alpha_at(&mut self, client: usize, t: u64) -> f64 {
        match &self.profile {
            AcceptanceProfile::TokenModel { .. } => self.profile.long_run_alpha(client),
            AcceptanceProfile::Stationary { levels } => levels[client],
            AcceptanceProfile::Piecewise { levels, switch_times } => {
                let segment = switch_times.partition_point(|&s| s <= t);
                levels[client][segment]
            }
            AcceptanceProfile::RandomWalk { step, lower, upper, .. } => {
                let (step, lower, upper) = (*step, *lower, *upper);
                let walk = &mut self.walks[client];
                while walk.values.len() <= t as usize {
                    let last = *walk.values.last().expect("walk starts non-empty");
                    let next = reflect(last + walk.rng.random_range(-step..=step), lower, upper);
                    walk.values.push(next);
                }
                walk.values[t as usize]
            }
        }
    }
}

fn reflect(mut v: f64, lower: f64, upper: f64) -> f64 {
    // step <= upper - lower, so one reflection per side suffices
    if v > upper {
        v = 2.0 * upper - v;
    }
    if v < lower {
        v = 2.0 * lower - v;
    }
    v.clamp(lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_level() {
        let mut t = AlphaTracker::new(AcceptanceProfile::Stationary { levels: vec![0.7, 0.2] }, 0).unwrap();
        for round in [0, 1, 17, 100_000] {
            assert_eq!(t.alpha_at(0, round), 0.7);
        }
    }

    #[test]
    fn piecewise_switch_is_inclusive() {
        let p = AcceptanceProfile::Piecewise {
            levels: vec![vec![0.3, 0.8]],
            switch_times: vec![500],
        };
        let mut t = AlphaTracker::new(p.clone(), 0).unwrap();
        assert_eq!(t.alpha_at(0, 499), 0.3);
        assert_eq!(t.alpha_at(0, 500), 0.8);
        assert_eq!(t.alpha_at(0, 5000), 0.8);
        assert_eq!(p.long_run_alpha(0), 0.8);
    }

    #[test]
    fn random_walk_time_average() {
        let p = AcceptanceProfile::RandomWalk {
            start: vec![0.5],
            step: 0.15,
            lower: 0.05,
            upper: 0.95,
        };
        let mut t = AlphaTracker::new(p.clone(), 4).unwrap();
        let n = 100_000u64;
        let mut sum = 0.0;
        for round in 0..n {
            let a = t.alpha_at(0, round);
            assert!((0.05..=0.95).contains(&a));
            sum += a;
        }
        let avg = sum / n as f64;
        assert!((avg - p.long_run_alpha(0)).abs() <= 0.02, "{avg}");
    }

    #[test]
    fn random_walk_is_query_order_independent() {
        let p = AcceptanceProfile::RandomWalk {
            start: vec![0.5, 0.4],
            step: 0.05,
            lower: 0.1,
            upper: 0.9,
        };
        let mut a = AlphaTracker::new(p.clone(), 9).unwrap();
        let mut b = AlphaTracker::new(p, 9).unwrap();
        let late = a.alpha_at(1, 300);
        for r in 0..300 {
            b.alpha_at(0, r);
        }
        assert_eq!(b.alpha_at(1, 300), late);
        assert_eq!(a.alpha_at(0, 12), b.alpha_at(0, 12));
    }

    #[test]
    fn validation() {
        assert!(AcceptanceProfile::Stationary { levels: vec![] }.validate().is_err());
        assert!(AcceptanceProfile::Stationary { levels: vec![0.99] }.validate().is_err());
        assert!(AcceptanceProfile::Piecewise {
            levels: vec![vec![0.3, 0.4]],
            switch_times: vec![5, 5]
        }
        .validate()
        .is_err());
        assert!(AcceptanceProfile::Piecewise {
            levels: vec![vec![0.3]],
            switch_times: vec![5]
        }
        .validate()
        .is_err());
        let walk = |lower, upper, step, s| AcceptanceProfile::RandomWalk {
            start: vec![s],
            step,
            lower,
            upper,
        };
        assert!(walk(0.01, 0.9, 0.1, 0.5).validate().is_err());
        assert!(walk(0.1, 0.99, 0.1, 0.5).validate().is_err());
        assert!(walk(0.1, 0.9, 0.0, 0.5).validate().is_err());
        assert!(walk(0.1, 0.9, 0.1, 0.95).validate().is_err());
        assert!(walk(0.1, 0.9, 0.1, 0.5).validate().is_ok());
    }
}
