//! Exponentially smoothed acceptance-rate and goodput estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on the acceptance estimate.
pub const ALPHA_MIN: f64 = 1e-4;
/// Upper clamp on the acceptance estimate; keeps it uniformly below 1.
pub const ALPHA_MAX: f64 = 1.0 - 1e-4;
/// Floor on the goodput estimate so the log-utility gradient stays finite.
pub const X_FLOOR: f64 = 1e-6;

pub const INITIAL_ALPHA_HAT: f64 = 0.5;
pub const INITIAL_GOODPUT_HAT: f64 = 1.0;

pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.5;

/// Step-size schedule for one of the two smoothers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Schedule {
    Constant(f64),
    /// `scale / t^exponent`, clamped into (0, 1).
    Decay {
        scale: f64,
        exponent: f64,
    },
}

impl Schedule {
    pub fn validate(&self, name: &str) -> Result<()> {
        match *self {
            Schedule::Constant(v) => {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "{name} = {v} must lie strictly inside (0, 1)"
                    )));
                }
            }
            Schedule::Decay { scale, exponent } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "{name} scale {scale} must be positive"
                    )));
                }
                if !(exponent > 0.5 && exponent <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "{name} decay exponent {exponent} must lie in (0.5, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Step size at round `t >= 1`.
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::Decay { scale, exponent } => {
                let t = t.max(1) as f64;
                (scale / t.powf(exponent)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Eta,
    Beta,
}

/// Smoothing parameters: `eta` for acceptance, `beta` for goodput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingParams {
    #[serde(default = "default_eta")]
    pub eta: Schedule,
    #[serde(default = "default_beta")]
    pub beta: Schedule,
}

fn default_eta() -> Schedule {
    Schedule::Constant(DEFAULT_ETA)
}

fn default_beta() -> Schedule {
    Schedule::Constant(DEFAULT_BETA)
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            beta: default_beta(),
        }
    }
}

impl SmoothingParams {
    pub fn constant(eta: f64, beta: f64) -> Result<Self> {
        let p = Self {
            eta: Schedule::Constant(eta),
            beta: Schedule::Constant(beta),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.eta.validate("eta")?;
        self.beta.validate("beta")?;
        if let (Schedule::Decay { exponent: a, .. }, Schedule::Decay { exponent: b, .. }) = (self.eta, self.beta) {
            if a <= b {
                return Err(Error::InvalidParameter(format!(
                    "eta decay exponent {a} must exceed beta decay exponent {b}"
                )));
            }
        }
        Ok(())
    }
}

pub fn smoothing_value(params: &SmoothingParams, which: Which, t: u64) -> f64 {
    match which {
        Which::Eta => params.eta.at(t),
        Which::Beta => params.beta.at(t),
    }
}

/// Acceptance update: `(1 - eta) prev + eta mean(ratios)`, clamped.
///
/// Returns `None` when no tokens were drafted; the caller keeps `prev`.
pub fn update_acceptance(prev: f64, ratios: &[f64], eta: f64) -> Option<f64> {
    if ratios.is_empty() {
        return None;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Some(((1.0 - eta) * prev + eta * mean).clamp(ALPHA_MIN, ALPHA_MAX))
}

/// Goodput update: `(1 - beta) prev + beta realized`, floored at [`X_FLOOR`].
pub fn update_goodput(prev: f64, realized: f64, beta: f64) -> f64 {
    ((1.0 - beta) * prev + beta * realized).max(X_FLOOR)
}

/// Expected tokens emitted per round with acceptance `alpha` and `slots` drafts:
/// `sum_{j=0}^{slots} alpha^j = (1 - alpha^(slots+1)) / (1 - alpha)`.
pub fn expected_goodput(alpha: f64, slots: u32) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "acceptance rate {alpha} outside (0, 1)"
        )));
    }
    Ok(expected_goodput_unchecked(alpha, slots))
}

pub(crate) fn expected_goodput_unchecked(alpha: f64, slots: u32) -> f64 {
    // expm1 keeps the numerator accurate when alpha is close to 1.
    let numer = -((slots as f64 + 1.0) * alpha.ln()).exp_m1();
    let value = numer / (1.0 - alpha);
    value.clamp(1.0, slots as f64 + 1.0)
}

/// Per-client smoothed state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientEstimates {
    pub alpha_hat: f64,
    pub goodput_hat: f64,
}

impl Default for ClientEstimates {
    fn default() -> Self {
        Self {
            alpha_hat: INITIAL_ALPHA_HAT,
            goodput_hat: INITIAL_GOODPUT_HAT,
        }
    }
}

impl ClientEstimates {
    /// Applies one round: acceptance first (skipped when nothing was drafted), then goodput.
    pub fn observe(&mut self, ratios: &[f64], realized: f64, eta: f64, beta: f64) {
        if let Some(a) = update_acceptance(self.alpha_hat, ratios, eta) {
            self.alpha_hat = a;
        }
        self.goodput_hat = update_goodput(self.goodput_hat, realized, beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_fixed_point_and_step() {
        for eta in [0.01, 0.3, 0.9] {
            assert_eq!(update_acceptance(0.5, &[0.2, 0.8], eta), Some(0.5));
        }
        assert_eq!(update_acceptance(0.5, &[1.0], 0.5), Some(0.75));
    }

    #[test]
    fn acceptance_skips_empty_round() {
        assert_eq!(update_acceptance(0.3, &[], 0.5), None);
        let mut e = ClientEstimates::default();
        e.observe(&[], 1.0, 0.5, 0.5);
        assert_eq!(e.alpha_hat, INITIAL_ALPHA_HAT);
        assert_eq!(e.goodput_hat, 1.0);
    }

    #[test]
    fn acceptance_clamps() {
        assert_eq!(update_acceptance(ALPHA_MAX, &[1.0; 4], 0.9), Some(ALPHA_MAX));
        assert_eq!(update_acceptance(ALPHA_MIN, &[0.0; 4], 0.9), Some(ALPHA_MIN));
    }

    #[test]
    fn acceptance_geometric_recursion() {
        let (a0, a, eta) = (0.9, 0.35, 0.1);
        let mut est = a0;
        for t in 1..=100 {
            est = update_acceptance(est, &[a, a, a], eta).unwrap();
            let closed = a + (1.0f64 - eta).powi(t) * (a0 - a);
            assert!((est - closed).abs() <= 1e-12, "t={t}: {est} vs {closed}");
        }
    }

    #[test]
    fn goodput_examples() {
        assert_eq!(update_goodput(2.5, 2.5, 0.3), 2.5);
        assert_eq!(update_goodput(2.0, 4.0, 0.5), 3.0);
        assert_eq!(update_goodput(0.0, 0.0, 0.5), X_FLOOR);
    }

    #[test]
    fn goodput_geometric_recursion() {
        let (x0, r, beta) = (1.0, 3.7, 0.05);
        let mut x = x0;
        for t in 1..=100 {
            x = update_goodput(x, r, beta);
            let closed = (1.0f64 - beta).powi(t) * (x0 - r).abs();
            assert!(((x - r).abs() - closed).abs() <= 1e-12);
        }
    }

    #[test]
    fn expected_goodput_examples() {
        for a in [0.01, 0.5, 0.99] {
            assert_eq!(expected_goodput(a, 0).unwrap(), 1.0);
        }
        assert!((expected_goodput(0.5, 2).unwrap() - 1.75).abs() < 1e-15);
        assert!((expected_goodput(1.0 - 1e-9, 5).unwrap() - 6.0).abs() < 1e-6);
        assert!(expected_goodput(0.0, 3).is_err());
        assert!(expected_goodput(1.0, 3).is_err());
        assert!(expected_goodput(f64::NAN, 3).is_err());
    }

    #[test]
    fn expected_goodput_matches_direct_sum() {
        for &a in &[0.05f64, 0.3, 0.6, 0.9, 0.999] {
            for s in 0..30u32 {
                let direct: f64 = (0..=s).map(|j| a.powi(j as i32)).sum();
                let v = expected_goodput(a, s).unwrap();
                assert!((v - direct).abs() <= 1e-12 * direct, "{a} {s}");
            }
        }
    }

    #[test]
    fn expected_goodput_monotone_and_concave() {
        for &a in &[0.1f64, 0.5, 0.9] {
            // stop before the increments fall below double resolution
            for s in 0..(40.0 / -a.log2()) as u32 {
                let d0 = expected_goodput(a, s + 1).unwrap() - expected_goodput(a, s).unwrap();
                let d1 = expected_goodput(a, s + 2).unwrap() - expected_goodput(a, s + 1).unwrap();
                assert!((d0 - a.powi(s as i32 + 1)).abs() < 1e-12);
                assert!(d0 > 0.0 && d1 < d0);
            }
            assert!(expected_goodput(a, 5).unwrap() < expected_goodput(a + 0.05, 5).unwrap());
        }
    }

    #[test]
    fn schedule_values() {
        assert_eq!(Schedule::Constant(0.5).at(1), 0.5);
        assert_eq!(Schedule::Constant(0.5).at(1000), 0.5);
        let d = Schedule::Decay {
            scale: 1.0,
            exponent: 1.0,
        };
        assert_eq!(d.at(4), 0.25);
        assert!(d.at(1) < 1.0);
    }

    #[test]
    fn decay_ratio_vanishes() {
        let p = SmoothingParams {
            eta: Schedule::Decay {
                scale: 1.0,
                exponent: 0.9,
            },
            beta: Schedule::Decay {
                scale: 1.0,
                exponent: 0.6,
            },
        };
        p.validate().unwrap();
        let ratio = |t| smoothing_value(&p, Which::Eta, t) / smoothing_value(&p, Which::Beta, t);
        assert!(ratio(1_000_000) <= 0.1 * ratio(10));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::Constant(0.0).validate("eta").is_err());
        assert!(Schedule::Constant(1.0).validate("eta").is_err());
        assert!(Schedule::Decay {
            scale: 1.0,
            exponent: 0.5
        }
        .validate("eta")
        .is_err());
        assert!(Schedule::Decay {
            scale: 1.0,
            exponent: 1.1
        }
        .validate("eta")
        .is_err());
        let inverted = SmoothingParams {
            eta: Schedule::Decay {
                scale: 1.0,
                exponent: 0.6,
            },
            beta: Schedule::Decay {
                scale: 1.0,
                exponent: 0.9,
            },
        };
        assert!(inverted.validate().is_err());
    }
}
