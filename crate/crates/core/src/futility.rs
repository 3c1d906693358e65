//! End-of-stage-1 population selection on hazard-ratio thresholds.

use serde::{Deserialize, Serialize};

use crate::combine::Scenario;
use crate::error::{Error, Result};
use crate::numerics::norm_quantile;

/// HR threshold with `P(HR_hat > theta | true HR) = gamma` when log HR_hat
/// is normal with mean log(true HR) and variance 4 / events.
pub fn calibrate_threshold(true_hr: f64, events: f64, gamma: f64) -> Result<f64> {
    if !(true_hr > 0.0) {
        return Err(Error::Domain(format!("true hazard ratio must be positive, got {true_hr}")));
    }
    if !(events >= 4.0) {
        return Err(Error::Domain(format!(
            "threshold calibration needs at least 4 events, got {events}"
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let z = -norm_quantile(gamma)?;
    Ok(true_hr * (z * 2.0 / events.sqrt()).exp())
}

/// Event count at which [`calibrate_threshold`] returns `theta`.
pub fn events_for_threshold(true_hr: f64, theta: f64, gamma: f64) -> Result<f64> {
    if !(true_hr > 0.0 && theta > true_hr) {
        return Err(Error::Domain(format!(
            "threshold {theta} must exceed the true hazard ratio {true_hr}"
        )));
    }
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::Domain(format!("gamma must lie in (0, 0.5), got {gamma}")));
    }
    let z = -norm_quantile(gamma)?;
    Ok((2.0 * z / (theta / true_hr).ln()).powi(2))
}

/// Largest gap tolerated between a threshold and the value implied by its
/// calibration inputs; stated thresholds are usually rounded.
pub const THETA_AGREEMENT: f64 = 5e-4;

/// Calibration inputs behind a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub gamma: f64,
    pub assumed_hr: f64,
    pub events: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FutilityRule {
    pub theta_full: f64,
    pub theta_sub: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_full: Option<Calibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_sub: Option<Calibration>,
}

impl FutilityRule {
    pub fn new(theta_full: f64, theta_sub: f64) -> Result<Self> {
        let rule = Self {
            theta_full,
            theta_sub,
            calibration_full: None,
            calibration_sub: None,
        };
        rule.validate()?;
        Ok(rule)
    }

    /// Thresholds derived from the calibration inputs of each population.
    pub fn calibrated(full: Calibration, sub: Calibration) -> Result<Self> {
        let rule = Self {
            theta_full: calibrate_threshold(full.assumed_hr, full.events, full.gamma)?,
            theta_sub: calibrate_threshold(sub.assumed_hr, sub.events, sub.gamma)?,
            calibration_full: Some(full),
            calibration_sub: Some(sub),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_full > 0.0 && self.theta_sub > 0.0) {
            return Err(Error::Config(format!(
                "futility thresholds must be positive, got ({}, {})",
                self.theta_full, self.theta_sub
            )));
        }
        for (name, theta, cal) in [
            ("full", self.theta_full, self.calibration_full),
            ("sub", self.theta_sub, self.calibration_sub),
        ] {
            let Some(c) = cal else { continue };
            if !(c.gamma > 0.0 && c.gamma < 1.0) || !(c.assumed_hr > 0.0) || !(c.events >= 4.0) {
                return Err(Error::Config(format!("invalid futility calibration {c:?}")));
            }
            let implied = calibrate_threshold(c.assumed_hr, c.events, c.gamma)?;
            if (implied - theta).abs() > THETA_AGREEMENT {
                return Err(Error::Config(format!(
                    "theta_{name} = {theta} disagrees with its calibration, which gives {implied:.4}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selection {
    ContinueBoth,
    ContinueSubOnly,
    ContinueFullOnly,
    StopFutility,
}

impl Selection {
    pub fn scenario(self) -> Option<Scenario> {
        match self {
            Selection::ContinueBoth => Some(Scenario::Both),
            Selection::ContinueSubOnly => Some(Scenario::SOnly),
            Selection::ContinueFullOnly => Some(Scenario::FOnly),
            Selection::StopFutility => None,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Selection::ContinueBoth => "continue for F and S",
            Selection::ContinueSubOnly => "continue for S only",
            Selection::ContinueFullOnly => "continue for F only",
            Selection::StopFutility => "stop for futility",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub selection: Selection,
    pub hr_full: f64,
    pub hr_sub: f64,
}

/// A population passes only when its observed HR is strictly below its
/// threshold.
pub fn select_population(hr_full: f64, hr_sub: f64, rule: &FutilityRule) -> SelectionDecision {
    let full_passes = hr_full < rule.theta_full;
    let sub_passes = hr_sub < rule.theta_sub;
    let selection = match (full_passes, sub_passes) {
        (true, true) => Selection::ContinueBoth,
        (false, true) => Selection::ContinueSubOnly,
        (true, false) => Selection::ContinueFullOnly,
        (false, false) => Selection::StopFutility,
    };
    SelectionDecision {
        selection,
        hr_full,
        hr_sub,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn calibration_examples() {
        assert!((calibrate_threshold(0.7, 287.0, 0.5).unwrap() - 0.7).abs() < 1e-15);
        assert!((calibrate_threshold(0.7, 287.0, 0.05).unwrap() - 0.850).abs() < 1e-3);
        assert!((calibrate_threshold(0.7, 171.0, 0.05).unwrap() - 0.900).abs() < 1e-3);
        assert!(matches!(calibrate_threshold(0.7, 3.0, 0.05), Err(Error::Domain(_))));
        assert!(calibrate_threshold(0.0, 100.0, 0.05).is_err());
    }

    #[test]
    fn calibration_must_agree_with_threshold() {
        let cal = |events| Calibration { gamma: 0.05, assumed_hr: 0.7, events };
        let mut rule = FutilityRule::new(0.85, 0.90).unwrap();
        rule.calibration_full = Some(cal(287.0));
        rule.calibration_sub = Some(cal(171.0));
        rule.validate().unwrap();
        rule.calibration_sub = Some(cal(250.0));
        let err = rule.validate().unwrap_err().to_string();
        assert!(err.contains("theta_sub"), "{err}");
        let derived = FutilityRule::calibrated(cal(373.0), cal(287.0)).unwrap();
        assert!((derived.theta_full - 0.83).abs() < 1e-4);
    }

    #[test]
    fn back_solved_event_counts() {
        let e = events_for_threshold(0.7, 0.85, 0.05).unwrap();
        assert!((e - 287.1).abs() < 0.1, "{e}");
        let e = events_for_threshold(0.7, 0.9, 0.05).unwrap();
        assert!((e - 171.3).abs() < 0.1, "{e}");
        let e = events_for_threshold(0.7, 0.83, 0.05).unwrap();
        assert!((e - 373.0).abs() < 0.5, "{e}");
        let theta = calibrate_threshold(0.7, e, 0.05).unwrap();
        assert!((theta - 0.83).abs() < 1e-12);
    }

    #[test]
    fn table_one_cells() {
        let rule = FutilityRule::new(0.85, 0.90).unwrap();
        assert_eq!(select_population(0.80, 0.85, &rule).selection, Selection::ContinueBoth);
        assert_eq!(select_population(0.90, 0.85, &rule).selection, Selection::ContinueSubOnly);
        assert_eq!(select_population(0.80, 0.95, &rule).selection, Selection::ContinueFullOnly);
        assert_eq!(select_population(0.86, 0.95, &rule).selection, Selection::StopFutility);
    }

    #[test]
    fn ties_fail_the_gate() {
        let rule = FutilityRule::new(0.85, 0.90).unwrap();
        assert_eq!(select_population(0.85, 0.80, &rule).selection, Selection::ContinueSubOnly);
        assert_eq!(select_population(0.80, 0.90, &rule).selection, Selection::ContinueFullOnly);
    }

    fn rank(s: Selection) -> u8 {
        // Number of populations continuing.
        match s {
            Selection::ContinueBoth => 2,
            Selection::ContinueSubOnly | Selection::ContinueFullOnly => 1,
            Selection::StopFutility => 0,
        }
    }

    proptest! {
        #[test]
        fn threshold_monotone(hr in 0.3..1.2f64, d in 4.0..2000.0f64, g in 0.01..0.49f64, dd in 1.0..100.0f64) {
            let t = calibrate_threshold(hr, d, g).unwrap();
            prop_assert!(calibrate_threshold(hr, d + dd, g).unwrap() < t);
            prop_assert!(calibrate_threshold(hr * 1.01, d, g).unwrap() > t);
            prop_assert!(t > hr);
        }

        #[test]
        fn threshold_tends_to_true_hr(hr in 0.3..1.2f64, d in 4.0..2000.0f64) {
            let t = calibrate_threshold(hr, d, 0.5 - 1e-9).unwrap();
            prop_assert!((t - hr).abs() < 1e-6);
        }

        #[test]
        fn raising_an_hr_never_widens_selection(f in 0.5..1.2f64, s in 0.5..1.2f64, bump in 0.0..0.3f64) {
            let rule = FutilityRule::new(0.85, 0.9).unwrap();
            let base = select_population(f, s, &rule).selection;
            let worse_f = select_population(f + bump, s, &rule).selection;
            let worse_s = select_population(f, s + bump, &rule).selection;
            prop_assert!(rank(worse_f) <= rank(base));
            prop_assert!(rank(worse_s) <= rank(base));
            if base != Selection::ContinueBoth {
                prop_assert!(worse_f == base || rank(worse_f) < rank(base));
            }
        }
    }
}
