//! Reference parameter sets for the three simulation settings and the
//! worked observed-data example.

use crate::boundaries::SpendingFunction;
use crate::combine::{StageWeights, WeightSet, WeightTable};
use crate::engine::{AnalysisEvidence, DesignKind, DesignSpec, Schedule};
use crate::futility::{Calibration, FutilityRule};
use crate::multiplicity::{within_population_transitions, Endpoint, HypothesisId, Population};
use crate::simdata::{
    AnalysisTrigger, DropoutRates, EndpointCoupling, ScenarioSpec, StageCutoff, StratumParams,
};

pub const ALPHA: f64 = 0.025;

/// Planned fractions in the order F-OS, F-PFS, S-OS, S-PFS.
pub fn planned_fractions() -> [Vec<f64>; 4] {
    [
        vec![0.69, 0.92, 1.0],
        vec![0.90, 1.0],
        vec![0.66, 0.91, 1.0],
        vec![0.89, 1.0],
    ]
}

pub fn schedule() -> Schedule {
    Schedule {
        analyses: 3,
        pfs: vec![1, 2],
        os: vec![1, 2, 3],
    }
}

fn triggers(pfs_full: usize, pfs_sub: usize, os_full: usize, os_sub: usize) -> Vec<AnalysisTrigger> {
    // IA1 at 90% of the PFS target, IA2 at the PFS target, FA at the OS target.
    let ninety = |n: usize| (0.9 * n as f64).round() as usize;
    vec![
        AnalysisTrigger { endpoint: Endpoint::Pfs, full_events: ninety(pfs_full), sub_events: ninety(pfs_sub) },
        AnalysisTrigger { endpoint: Endpoint::Pfs, full_events: pfs_full, sub_events: pfs_sub },
        AnalysisTrigger { endpoint: Endpoint::Os, full_events: os_full, sub_events: os_sub },
    ]
}

/// Scenario for setting 1, 2 or 3.
pub fn scenario(setting: u8) -> Option<ScenarioSpec> {
    let sub = StratumParams { median_pfs: 4.0, median_os: 10.5, hr_pfs: 0.7, hr_os: 0.7 };
    let complement_hr = if setting == 3 { 1.0 } else { 0.7 };
    let complement = StratumParams { median_pfs: 3.0, median_os: 5.7, hr_pfs: complement_hr, hr_os: complement_hr };
    let dropout = DropoutRates { pfs_annual: 0.10, os_annual: 0.01 };
    let (sample_size, sub_prevalence, enroll_duration, cutoff, trig) = match setting {
        1 => (554, 0.75, 28.0, 21.3, triggers(519, 387, 515, 380)),
        2 | 3 => (924, 0.5, 33.0, 28.2, triggers(859, 423, 843, 398)),
        _ => return None,
    };
    Some(ScenarioSpec {
        name: format!("setting-{setting}"),
        sample_size,
        sub_prevalence,
        enroll_duration,
        stage1_cutoff: StageCutoff::Months(cutoff),
        sub,
        complement,
        dropout,
        coupling: EndpointCoupling::Independent,
        triggers: trig,
        true_nulls: None,
    })
}

/// The same scenario with every hazard ratio set to one.
pub fn global_null(mut spec: ScenarioSpec) -> ScenarioSpec {
    for s in [&mut spec.sub, &mut spec.complement] {
        s.hr_pfs = 1.0;
        s.hr_os = 1.0;
    }
    spec.name = format!("{}-null", spec.name);
    spec.true_nulls = None;
    spec
}

/// Initial alphas (F-OS, F-PFS, S-OS, S-PFS).
pub fn initial_alphas(setting: u8, kind: DesignKind) -> [f64; 4] {
    match (setting, kind) {
        (1, DesignKind::Ggsd) => [0.01429, 0.01071, 0.01513, 0.00987],
        (1, _) => [0.0022, 0.00165, 0.0128, 0.00835],
        (_, DesignKind::Ggsd) => [0.01488, 0.01012, 0.0148, 0.0102],
        (_, _) => [0.00025, 0.00017, 0.01458, 0.0100],
    }
}

/// Thresholds with the stage-1 PFS event counts they were back-solved
/// from at gamma = 0.05 and HR 0.7.
pub fn futility_rule(setting: u8) -> FutilityRule {
    let ((f, nf), (s, ns)) = if setting == 1 { ((0.85, 287.0), (0.90, 171.0)) } else { ((0.83, 373.0), (0.85, 287.0)) };
    let cal = |events| Calibration { gamma: 0.05, assumed_hr: 0.7, events };
    let rule = FutilityRule {
        theta_full: f,
        theta_sub: s,
        calibration_full: Some(cal(nf)),
        calibration_sub: Some(cal(ns)),
    };
    rule.validate().expect("thresholds agree with their calibration");
    rule
}

fn fixed(label: &str, pfs: f64, os: f64) -> WeightSet {
    let w = |sq: f64| StageWeights::from_squares(sq, 1.0 - sq).expect("valid squares");
    WeightSet::Fixed {
        label: label.to_string(),
        table: WeightTable::constant(w(pfs), w(os), 3),
    }
}

/// The seven pre-specified weight sets, labelled by their squared
/// stage-1 weights (PFS|OS when they differ).
pub fn fixed_weight_sets() -> Vec<WeightSet> {
    vec![
        fixed("0.2", 0.2, 0.2),
        fixed("0.3", 0.3, 0.3),
        fixed("0.5", 0.5, 0.5),
        fixed("0.5|0.7", 0.5, 0.7),
        fixed("0.7", 0.7, 0.7),
        fixed("0.8", 0.8, 0.8),
        fixed("0.6", 0.6, 0.6),
    ]
}

/// Event-driven reference weights followed by the fixed sets.
pub fn all_weight_sets() -> Vec<WeightSet> {
    std::iter::once(WeightSet::EventDriven).chain(fixed_weight_sets()).collect()
}

pub fn design(setting: u8, kind: DesignKind, weights: WeightSet) -> DesignSpec {
    let adaptive = kind.is_adaptive();
    DesignSpec {
        kind,
        alpha: ALPHA,
        alphas: initial_alphas(setting, kind),
        transitions: within_population_transitions(),
        spending: SpendingFunction::LanDeMetsObf,
        fractions: planned_fractions(),
        schedule: schedule(),
        weights,
        futility: adaptive.then(|| futility_rule(setting)),
        special_graph: kind == DesignKind::Ggsd,
    }
}

/// GSD plus AD and gGSD under every given weight set.
pub fn design_family(setting: u8, weight_sets: &[WeightSet]) -> Vec<DesignSpec> {
    let mut out = vec![design(setting, DesignKind::Gsd, weight_sets.first().cloned().unwrap_or(WeightSet::EventDriven))];
    for w in weight_sets {
        out.push(design(setting, DesignKind::Ad, w.clone()));
        out.push(design(setting, DesignKind::Ggsd, w.clone()));
    }
    out
}

/// Stage-1 hazard ratios of the worked example; only their position
/// relative to the thresholds (F passes, S fails) matters.
pub const EXAMPLE_HRS: (f64, f64) = (0.78, 0.88);

/// Observed p-values of the worked example. GSD uses the pooled p-values;
/// gGSD uses the combined F p-values, with the S p-values available for
/// the Hochberg intersection.
pub fn example_evidence() -> Vec<AnalysisEvidence> {
    let f_os = HypothesisId::new(Population::Full, Endpoint::Os).index();
    let f_pfs = HypothesisId::new(Population::Full, Endpoint::Pfs).index();
    let s_os = HypothesisId::new(Population::Sub, Endpoint::Os).index();
    let s_pfs = HypothesisId::new(Population::Sub, Endpoint::Pfs).index();
    let mut out = vec![AnalysisEvidence::default(); 3];
    // Pooled GSD p-values: S PFS, S OS, F PFS, F OS.
    let pooled = [
        (Some(0.0177), Some(0.1205), Some(0.0008), Some(0.0104)),
        (Some(0.0137), Some(0.0502), Some(0.00022), Some(0.0023)),
        (None, Some(0.0534), None, Some(0.0011)),
    ];
    for (ev, (sp, so, fp, fo)) in out.iter_mut().zip(pooled) {
        ev.pooled[s_pfs] = sp;
        ev.pooled[s_os] = so;
        ev.pooled[f_pfs] = fp;
        ev.pooled[f_os] = fo;
        ev.direct[s_pfs] = sp;
        ev.direct[s_os] = so;
    }
    out[0].direct[f_pfs] = Some(0.0022);
    out[0].direct[f_os] = Some(0.0125);
    out[1].direct[f_os] = Some(0.0019);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_design, TerminationReason};
    use crate::futility::Selection;

    #[test]
    fn presets_validate() {
        for setting in 1..=3 {
            scenario(setting).unwrap().validate().unwrap();
            for d in design_family(setting, &all_weight_sets()) {
                d.validate().unwrap();
            }
        }
        assert!(scenario(4).is_none());
        assert_eq!(all_weight_sets().len(), 8);
    }

    #[test]
    fn setting_three_declares_full_population_null() {
        let nulls = scenario(3).unwrap().true_nulls();
        assert_eq!(nulls.len(), 2);
        assert!(nulls.iter().all(|h| h.population == Population::Full));
        assert_eq!(global_null(scenario(1).unwrap()).true_nulls().len(), 4);
    }

    #[test]
    fn worked_example() {
        let half = fixed("0.5", 0.5, 0.5);
        let gsd = run_design(&design(2, DesignKind::Gsd, half.clone()), None, &example_evidence()).unwrap();
        assert_eq!(gsd.rejection_count(), 0);
        let g = run_design(&design(2, DesignKind::Ggsd, half), Some(EXAMPLE_HRS), &example_evidence()).unwrap();
        assert_eq!(g.selection.unwrap().selection, Selection::ContinueFullOnly);
        let f_pfs = HypothesisId::new(Population::Full, Endpoint::Pfs);
        let f_os = HypothesisId::new(Population::Full, Endpoint::Os);
        assert_eq!(g.rejected_at[f_pfs.index()], Some(1));
        assert_eq!(g.rejected_at[f_os.index()], Some(2));
        assert_eq!(g.termination.reason, TerminationReason::AllRejected);
        assert_eq!(g.termination.analysis, Some(2));
        println!("{}", g.narrative());
        println!("{}", gsd.narrative());
    }
}
