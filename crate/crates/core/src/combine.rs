//! Inverse-normal combination of stage-wise p-values and the scenario
//! dependent pairing of stage-1 and stage-2 cohorts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiplicity::{hochberg_intersection, Endpoint, HypothesisId, Population};
use crate::numerics::norm_quantile;

/// p-values of exactly 0 or 1 are moved this far inside the unit interval.
pub const P_CLAMP: f64 = 1e-12;

/// Tolerance on `w1^2 + w2^2 = 1`.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    w1: f64,
    w2: f64,
}

impl StageWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(w1 >= 0.0 && w2 >= 0.0) {
            return Err(Error::Domain(format!("stage weights must be nonnegative, got ({w1}, {w2})")));
        }
        let norm = w1 * w1 + w2 * w2;
        if (norm - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Domain(format!(
                "stage weights must satisfy w1^2 + w2^2 = 1, got {norm}"
            )));
        }
        Ok(Self { w1, w2 })
    }

    /// Weights given by their squares, e.g. `(0.7, 0.3)` for `(sqrt 0.7, sqrt 0.3)`.
    pub fn from_squares(s1: f64, s2: f64) -> Result<Self> {
        if !(s1 >= 0.0 && s2 >= 0.0) || ((s1 + s2) - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Domain(format!(
                "squared stage weights must be nonnegative and sum to 1, got ({s1}, {s2})"
            )));
        }
        Ok(Self {
            w1: s1.sqrt(),
            w2: s2.sqrt(),
        })
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }
}

/// Weights proportional to the square root of the stage-wise event counts.
///
/// Depends on observed counts, so it is only a planning and reference
/// utility; pre-specified weights drive confirmatory tests.
pub fn event_weights(n1: f64, n2: f64) -> Result<StageWeights> {
    if !(n1 >= 0.0 && n2 >= 0.0) || n1 + n2 <= 0.0 {
        return Err(Error::Domain(format!(
            "event weights need nonnegative counts with a positive total, got ({n1}, {n2})"
        )));
    }
    let total = n1 + n2;
    Ok(StageWeights {
        w1: (n1 / total).sqrt(),
        w2: (n2 / total).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedZ {
    pub z: f64,
    /// Set when an input p-value had to be moved off 0 or 1.
    pub clamped: bool,
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p <= 0.0 {
        (P_CLAMP, true)
    } else if p >= 1.0 {
        (1.0 - P_CLAMP, true)
    } else {
        (p, false)
    }
}

/// `w1 * Phi^-1(1 - p1) + w2 * Phi^-1(1 - p2)`.
pub fn inverse_normal(p1: f64, p2: f64, w: StageWeights) -> Result<CombinedZ> {
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
        return Err(Error::Domain(format!("p-values must lie in [0, 1], got ({p1}, {p2})")));
    }
    let (p1, c1) = clamp_p(p1);
    let (p2, c2) = clamp_p(p2);
    // Phi^-1(1 - p) = -Phi^-1(p), which keeps precision for small p.
    let z1 = if w.w1 > 0.0 { -norm_quantile(p1)? } else { 0.0 };
    let z2 = if w.w2 > 0.0 { -norm_quantile(p2)? } else { 0.0 };
    Ok(CombinedZ {
        z: w.w1 * z1 + w.w2 * z2,
        clamped: (c1 && w.w1 > 0.0) || (c2 && w.w2 > 0.0),
    })
}

/// Population selected at the end of stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    SOnly,
    FOnly,
    Both,
}

impl Scenario {
    pub fn populations(self) -> &'static [Population] {
        match self {
            Scenario::SOnly => &[Population::Sub],
            Scenario::FOnly => &[Population::Full],
            Scenario::Both => &[Population::Sub, Population::Full],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::SOnly => "S only",
            Scenario::FOnly => "F only",
            Scenario::Both => "F and S",
        }
    }
}

/// Population slot of a p-value, including the F-S intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "F")]
    Full,
    #[serde(rename = "S")]
    Sub,
    #[serde(rename = "FS")]
    Intersection,
}

impl Slot {
    pub fn label(self) -> &'static str {
        match self {
            Slot::Full => "F",
            Slot::Sub => "S",
            Slot::Intersection => "FS",
        }
    }
}

impl From<Population> for Slot {
    fn from(p: Population) -> Self {
        match p {
            Population::Full => Slot::Full,
            Population::Sub => Slot::Sub,
        }
    }
}

/// What a combined statistic tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestTarget {
    Elementary { hypothesis: HypothesisId },
    Intersection { endpoint: Endpoint },
}

impl TestTarget {
    pub fn elementary(h: HypothesisId) -> Self {
        TestTarget::Elementary { hypothesis: h }
    }

    pub fn endpoint(self) -> Endpoint {
        match self {
            TestTarget::Elementary { hypothesis } => hypothesis.endpoint,
            TestTarget::Intersection { endpoint } => endpoint,
        }
    }

    pub fn label(self) -> String {
        match self {
            TestTarget::Elementary { hypothesis } => hypothesis.label(),
            TestTarget::Intersection { endpoint } => format!("{}(FS)", endpoint.label()),
        }
    }
}

/// Cohort-wise one-sided p-values at one analysis.
///
/// Intersection entries left empty are filled from the F and S entries of
/// the same stage with [`hochberg_intersection`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortPValues {
    stage1: [[Option<f64>; 3]; 2],
    stage2: [[Option<f64>; 3]; 2],
}

fn endpoint_index(e: Endpoint) -> usize {
    match e {
        Endpoint::Pfs => 0,
        Endpoint::Os => 1,
    }
}

fn slot_index(s: Slot) -> usize {
    match s {
        Slot::Full => 0,
        Slot::Sub => 1,
        Slot::Intersection => 2,
    }
}

impl CohortPValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, stage: u8, endpoint: Endpoint, slot: Slot, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "stage-{stage} {} {} p-value {p} outside [0, 1]",
                endpoint.label(),
                slot.label()
            )));
        }
        let table = match stage {
            1 => &mut self.stage1,
            2 => &mut self.stage2,
            _ => return Err(Error::Domain(format!("stage must be 1 or 2, got {stage}"))),
        };
        table[endpoint_index(endpoint)][slot_index(slot)] = Some(p);
        Ok(())
    }

    /// Entry for a stage and slot, deriving intersections on demand.
    pub fn get(&self, stage: u8, endpoint: Endpoint, slot: Slot) -> Result<f64> {
        let table = match stage {
            1 => &self.stage1,
            _ => &self.stage2,
        };
        let row = &table[endpoint_index(endpoint)];
        if let Some(p) = row[slot_index(slot)] {
            return Ok(p);
        }
        let missing = || {
            Error::Data(format!(
                "p_{stage}^{{{},{}}} is missing",
                slot.label(),
                endpoint.label()
            ))
        };
        match slot {
            Slot::Intersection => {
                let f = row[slot_index(Slot::Full)].ok_or_else(missing)?;
                let s = row[slot_index(Slot::Sub)].ok_or_else(missing)?;
                Ok(hochberg_intersection(f, s))
            }
            _ => Err(missing()),
        }
    }
}

/// One combination test: what it tests and the stage-wise p-values it uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WiredTest {
    pub target: TestTarget,
    pub p1: f64,
    pub p2: f64,
}

/// Pairs stage-1 and stage-2 p-values for one endpoint under a scenario.
///
/// The stage-2 slot follows the selected population: the subgroup cohort
/// under S only, the full cohort under F only, and the matching slot when
/// both continue.
pub fn scenario_wiring(
    scenario: Scenario,
    cohorts: &CohortPValues,
    endpoint: Endpoint,
) -> Result<Vec<WiredTest>> {
    let inter = TestTarget::Intersection { endpoint };
    let elem = |pop| TestTarget::elementary(HypothesisId::new(pop, endpoint));
    let p1 = |slot| cohorts.get(1, endpoint, slot);
    let p2 = |slot| cohorts.get(2, endpoint, slot);
    let wired = match scenario {
        Scenario::SOnly => vec![
            WiredTest {
                target: inter,
                p1: p1(Slot::Intersection)?,
                p2: p2(Slot::Sub)?,
            },
            WiredTest {
                target: elem(Population::Sub),
                p1: p1(Slot::Sub)?,
                p2: p2(Slot::Sub)?,
            },
        ],
        Scenario::FOnly => vec![
            WiredTest {
                target: inter,
                p1: p1(Slot::Intersection)?,
                p2: p2(Slot::Full)?,
            },
            WiredTest {
                target: elem(Population::Full),
                p1: p1(Slot::Full)?,
                p2: p2(Slot::Full)?,
            },
        ],
        Scenario::Both => vec![
            WiredTest {
                target: inter,
                p1: p1(Slot::Intersection)?,
                p2: p2(Slot::Intersection)?,
            },
            WiredTest {
                target: elem(Population::Full),
                p1: p1(Slot::Full)?,
                p2: p2(Slot::Full)?,
            },
            WiredTest {
                target: elem(Population::Sub),
                p1: p1(Slot::Sub)?,
                p2: p2(Slot::Sub)?,
            },
        ],
    };
    Ok(wired)
}

/// Pre-specified weights per endpoint and analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub pfs: Vec<StageWeights>,
    pub os: Vec<StageWeights>,
}

impl WeightTable {
    /// The same weights for every analysis of an endpoint.
    pub fn constant(pfs: StageWeights, os: StageWeights, analyses: usize) -> Self {
        Self {
            pfs: vec![pfs; analyses],
            os: vec![os; analyses],
        }
    }

    /// Weights for `endpoint` at 1-based analysis `k`; the last entry is
    /// reused when the table is shorter than the schedule.
    pub fn get(&self, endpoint: Endpoint, k: usize) -> Result<StageWeights> {
        let list = match endpoint {
            Endpoint::Pfs => &self.pfs,
            Endpoint::Os => &self.os,
        };
        list.get(k.saturating_sub(1))
            .or(list.last())
            .copied()
            .ok_or_else(|| Error::Config(format!("no {} weights configured", endpoint.label())))
    }
}

/// Either pre-specified weights or the event-driven reference weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSet {
    Fixed { label: String, table: WeightTable },
    EventDriven,
}

impl WeightSet {
    pub fn label(&self) -> &str {
        match self {
            WeightSet::Fixed { label, .. } => label,
            WeightSet::EventDriven => "events",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm_cdf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn inverse_normal_examples() {
        let w = StageWeights::new(1.0, 0.0).unwrap();
        for p2 in [0.001, 0.5, 0.99] {
            assert!((inverse_normal(0.025, p2, w).unwrap().z - 1.959_964).abs() < 1e-6);
        }
        let half = StageWeights::from_squares(0.5, 0.5).unwrap();
        let z = inverse_normal(0.025, 0.025, half).unwrap().z;
        assert!((z - 2.0_f64.sqrt() * 1.959_963_984_540_054).abs() < 1e-12);
        assert!((z - 2.771_80).abs() < 1e-4);
        for w in [half, StageWeights::from_squares(0.7, 0.3).unwrap(), w] {
            assert_eq!(inverse_normal(0.5, 0.5, w).unwrap().z, 0.0);
        }
    }

    #[test]
    fn clamping_is_flagged() {
        let half = StageWeights::from_squares(0.5, 0.5).unwrap();
        let c = inverse_normal(0.0, 0.3, half).unwrap();
        assert!(c.clamped && c.z.is_finite());
        let c = inverse_normal(0.2, 1.0, half).unwrap();
        assert!(c.clamped && c.z.is_finite());
        assert!(!inverse_normal(0.2, 0.3, half).unwrap().clamped);
        assert!(inverse_normal(-0.1, 0.3, half).is_err());
    }

    #[test]
    fn weight_validation() {
        assert!(StageWeights::new(0.9, 0.9).is_err());
        assert!(StageWeights::new(-0.6, 0.8).is_err());
        assert!(StageWeights::new(0.6, 0.8).is_ok());
        assert!(StageWeights::from_squares(0.7, 0.4).is_err());
    }

    #[test]
    fn event_weight_examples() {
        let w = event_weights(100.0, 100.0).unwrap();
        assert!((w.w1() - 0.5_f64.sqrt()).abs() < 1e-15 && (w.w2() - 0.5_f64.sqrt()).abs() < 1e-15);
        let w = event_weights(300.0, 100.0).unwrap();
        assert!((w.w1() - 0.75_f64.sqrt()).abs() < 1e-15 && (w.w2() - 0.5).abs() < 1e-15);
        let w = event_weights(100.0, 0.0).unwrap();
        assert_eq!((w.w1(), w.w2()), (1.0, 0.0));
        assert!(event_weights(0.0, 0.0).is_err());
    }

    fn cohorts() -> CohortPValues {
        let mut c = CohortPValues::new();
        for e in Endpoint::BOTH {
            c.set(1, e, Slot::Full, 0.04).unwrap();
            c.set(1, e, Slot::Sub, 0.01).unwrap();
            c.set(2, e, Slot::Full, 0.2).unwrap();
            c.set(2, e, Slot::Sub, 0.03).unwrap();
        }
        c
    }

    #[test]
    fn wiring_s_only() {
        let w = scenario_wiring(Scenario::SOnly, &cohorts(), Endpoint::Pfs).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].target, TestTarget::Intersection { endpoint: Endpoint::Pfs });
        assert!((w[0].p1 - 0.02).abs() < 1e-15);
        assert!(w.iter().all(|t| t.p2 == 0.03));
        assert_eq!(w[1].p1, 0.01);
    }

    #[test]
    fn wiring_f_only() {
        let w = scenario_wiring(Scenario::FOnly, &cohorts(), Endpoint::Os).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|t| t.p2 == 0.2));
        assert_eq!(
            w[1].target,
            TestTarget::elementary(HypothesisId::new(Population::Full, Endpoint::Os))
        );
        assert_eq!(w[1].p1, 0.04);
    }

    #[test]
    fn wiring_both() {
        let w = scenario_wiring(Scenario::Both, &cohorts(), Endpoint::Pfs).unwrap();
        assert_eq!(w.len(), 3);
        // Stage-2 intersection: min(2 * 0.03, 0.2).
        assert!((w[0].p2 - 0.06).abs() < 1e-15);
        assert!((w[0].p1 - 0.02).abs() < 1e-15);
    }

    #[test]
    fn wiring_names_missing_slot() {
        let mut c = CohortPValues::new();
        c.set(1, Endpoint::Pfs, Slot::Sub, 0.01).unwrap();
        c.set(2, Endpoint::Pfs, Slot::Sub, 0.01).unwrap();
        let err = scenario_wiring(Scenario::SOnly, &c, Endpoint::Pfs).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("p_1^{FS,PFS}")), "{err}");
    }

    #[test]
    fn wiring_ignores_values() {
        // The shape depends only on the scenario, never on the p-values.
        let mut other = CohortPValues::new();
        for e in Endpoint::BOTH {
            for stage in [1, 2] {
                other.set(stage, e, Slot::Full, 0.9).unwrap();
                other.set(stage, e, Slot::Sub, 1e-6).unwrap();
            }
        }
        for s in [Scenario::SOnly, Scenario::FOnly, Scenario::Both] {
            let a: Vec<_> = scenario_wiring(s, &cohorts(), Endpoint::Os).unwrap().iter().map(|t| t.target).collect();
            let b: Vec<_> = scenario_wiring(s, &other, Endpoint::Os).unwrap().iter().map(|t| t.target).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn weight_table_lookup() {
        let t = WeightTable {
            pfs: vec![StageWeights::from_squares(0.7, 0.3).unwrap()],
            os: vec![
                StageWeights::from_squares(0.5, 0.5).unwrap(),
                StageWeights::from_squares(0.6, 0.4).unwrap(),
            ],
        };
        assert_eq!(t.get(Endpoint::Pfs, 2).unwrap(), t.pfs[0]);
        assert_eq!(t.get(Endpoint::Os, 2).unwrap(), t.os[1]);
        assert_eq!(t.get(Endpoint::Os, 3).unwrap(), t.os[1]);
    }

    // Kolmogorov-Smirnov distance of the combined statistic from N(0, 1).
    #[test]
    fn null_combination_is_standard_normal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240917);
        for w in [
            StageWeights::from_squares(0.5, 0.5).unwrap(),
            StageWeights::from_squares(0.8, 0.2).unwrap(),
        ] {
            let n = 100_000;
            let mut z: Vec<f64> = (0..n)
                .map(|_| {
                    let p1: f64 = rng.random();
                    let p2: f64 = rng.random();
                    inverse_normal(p1, p2, w).unwrap().z
                })
                .collect();
            z.sort_by(f64::total_cmp);
            let d = z
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = norm_cdf(x);
                    (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < 0.01, "KS distance {d}");
        }
    }

    proptest! {
        #[test]
        fn combination_decreases_in_each_p(a in 0.001..0.998f64, b in 0.001..0.998f64, d in 0.0001..0.001f64, s in 0.05..0.95f64) {
            let w = StageWeights::from_squares(s, 1.0 - s).unwrap();
            let base = inverse_normal(a, b, w).unwrap().z;
            prop_assert!(inverse_normal(a + d, b, w).unwrap().z < base);
            prop_assert!(inverse_normal(a, b + d, w).unwrap().z < base);
        }
    }
}
