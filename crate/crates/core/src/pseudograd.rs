//! Pseudo partial derivatives of piecewise-constant functions.
//!
//! Both estimators work from a local [`StepProfile`]: the plateau value at
//! the evaluation point and, on each side, the position of the nearest step
//! together with the value just past it.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    /// Where the function changes value.
    pub position: f64,
    /// Plateau value immediately past the step.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepProfile {
    pub x: f64,
    pub left: Option<Step>,
    pub mid: f64,
    pub right: Option<Step>,
}

impl StepProfile {
    pub fn flat(x: f64, value: f64) -> Self {
        StepProfile { x, left: None, mid: value, right: None }
    }

    pub fn is_valid(&self) -> bool {
        self.left.is_none_or(|l| l.position < self.x && l.value != self.mid)
            && self.right.is_none_or(|r| r.position > self.x && r.value != self.mid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorKind {
    /// Symmetric difference estimator.
    Sde,
    /// Mean envelope estimator.
    #[default]
    Mee,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Lower bound on the perturbation used where the envelopes are flat
    /// (a side without a step).
    pub flat_region_delta_min: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { kind: EstimatorKind::Mee, flat_region_delta_min: 0.1 }
    }
}

impl EstimatorConfig {
    pub fn check(&self) -> Result<()> {
        if self.flat_region_delta_min > 0.0 && self.flat_region_delta_min.is_finite() {
            Ok(())
        } else {
            Err(Error::config("flat_region_delta_min must be positive and finite"))
        }
    }
}

fn right_slope(p: &StepProfile, min_delta: f64) -> f64 {
    p.right.map_or(0.0, |r| (r.value - p.mid) / (r.position - p.x).max(min_delta))
}

fn left_slope(p: &StepProfile, min_delta: f64) -> f64 {
    p.left.map_or(0.0, |l| (p.mid - l.value) / (p.x - l.position).max(min_delta))
}

/// Mean of the adaptive one-sided finite differences that just cross the
/// nearest step on each side. A side without a step contributes zero.
pub fn sde(p: &StepProfile, _cfg: &EstimatorConfig) -> f64 {
    0.5 * (right_slope(p, 0.0) + left_slope(p, 0.0))
}

/// Mean slope of the local upper and lower linear envelopes through the
/// plateaus on either side of `x`. With a step missing on one side the
/// envelopes are flat there, so the existing side falls back to the
/// symmetric difference with its perturbation bounded below by
/// `flat_region_delta_min`.
pub fn mee(p: &StepProfile, cfg: &EstimatorConfig) -> f64 {
    match (p.left, p.right) {
        (Some(l), Some(r)) => {
            let run = r.position - l.position;
            let upper = (p.mid.max(r.value) - l.value.max(p.mid)) / run;
            let lower = (p.mid.min(r.value) - l.value.min(p.mid)) / run;
            0.5 * (upper + lower)
        }
        (None, None) => 0.0,
        _ => {
            let d = cfg.flat_region_delta_min;
            0.5 * (right_slope(p, d) + left_slope(p, d))
        }
    }
}

pub fn estimate(p: &StepProfile, cfg: &EstimatorConfig) -> f64 {
    match cfg.kind {
        EstimatorKind::Sde => sde(p, cfg),
        EstimatorKind::Mee => mee(p, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> EstimatorConfig {
        EstimatorConfig { kind: EstimatorKind::Sde, flat_region_delta_min: 0.25 }
    }

    // f = 0 for x < 1, 1 on (1, 3), 3 for x > 3
    fn staircase(x: f64) -> StepProfile {
        StepProfile {
            x,
            left: Some(Step { position: 1.0, value: 0.0 }),
            mid: 1.0,
            right: Some(Step { position: 3.0, value: 3.0 }),
        }
    }

    fn ap_fixture() -> StepProfile {
        StepProfile {
            x: 0.8,
            left: Some(Step { position: 0.7, value: 1.0 }),
            mid: 5.0 / 6.0,
            right: Some(Step { position: 0.9, value: 2.0 / 3.0 }),
        }
    }

    #[test]
    fn sde_values() {
        assert_eq!(sde(&staircase(2.0), &cfg()), 1.5);
        assert_eq!(sde(&StepProfile::flat(2.0, 4.0), &cfg()), 0.0);
        assert!((sde(&ap_fixture(), &cfg()) + 5.0 / 3.0).abs() < 1e-12);
        // one-sided: the missing side counts as a flat zero slope
        let mut p = staircase(2.0);
        p.left = None;
        assert_eq!(sde(&p, &cfg()), 1.0);
    }

    #[test]
    fn mee_values() {
        assert_eq!(mee(&staircase(2.0), &cfg()), 0.75);
        assert_eq!(mee(&StepProfile::flat(2.0, 4.0), &cfg()), 0.0);
        assert!((mee(&ap_fixture(), &cfg()) + 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mee_one_sided_uses_bounded_difference() {
        let p = StepProfile { x: 2.0, left: None, mid: 1.0, right: Some(Step { position: 2.1, value: 3.0 }) };
        // distance 0.1 raised to the 0.25 floor
        assert_eq!(mee(&p, &cfg()), 0.5 * 2.0 / 0.25);
        let far = StepProfile { x: 2.0, left: None, mid: 1.0, right: Some(Step { position: 4.0, value: 3.0 }) };
        assert_eq!(mee(&far, &cfg()), 0.5);
    }

    #[test]
    fn mee_is_position_invariant_sde_is_not() {
        assert_eq!(mee(&staircase(1.2), &cfg()), mee(&staircase(2.7), &cfg()));
        assert_ne!(sde(&staircase(1.2), &cfg()), sde(&staircase(2.7), &cfg()));
    }

    fn arb_profile() -> impl Strategy<Value = StepProfile> {
        (
            -5.0..5.0f64,
            prop::option::of((0.001..3.0f64, -2.0..2.0f64)),
            -2.0..2.0f64,
            prop::option::of((0.001..3.0f64, -2.0..2.0f64)),
        )
            .prop_map(|(x, l, mid, r)| StepProfile {
                x,
                left: l.map(|(d, v)| Step { position: x - d, value: v }),
                mid,
                right: r.map(|(d, v)| Step { position: x + d, value: v }),
            })
            .prop_filter("valid", |p| p.is_valid())
    }

    proptest! {
        #[test]
        fn sign_agreement(p in arb_profile()) {
            let f_l = p.left.map_or(p.mid, |s| s.value);
            let f_r = p.right.map_or(p.mid, |s| s.value);
            for kind in [EstimatorKind::Sde, EstimatorKind::Mee] {
                let c = EstimatorConfig { kind, ..cfg() };
                let g = estimate(&p, &c);
                if f_l <= p.mid && p.mid <= f_r && (f_l < p.mid || p.mid < f_r) {
                    prop_assert!(g > 0.0);
                }
                if f_l >= p.mid && p.mid >= f_r && (f_l > p.mid || p.mid > f_r) {
                    prop_assert!(g < 0.0);
                }
            }
        }
    }
}
