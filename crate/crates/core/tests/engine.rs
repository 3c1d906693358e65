use ggsd::combine::Slot;
use ggsd::engine::{run_design, run_selected, AnalysisEvidence, DecisionTrace, DesignKind, DesignSpec};
use ggsd::harness::{replication_trial, simulate_replication};
use ggsd::multiplicity::{Endpoint, HypothesisId, Population};
use ggsd::presets;
use ggsd::simdata::{schedule_analyses_capped, snapshot_at};
use proptest::prelude::*;

fn check(trace: &DecisionTrace, what: &str) {
    let v = trace.invariant_violations(presets::ALPHA);
    assert!(v.is_empty(), "{what}: {v:?}\n{}", trace.narrative());
}

#[test]
fn simulated_traces_obey_every_invariant() {
    for setting in 1..=3u8 {
        let alt = presets::scenario(setting).unwrap();
        let designs = presets::design_family(setting, &presets::all_weight_sets());
        for spec in [alt.clone(), presets::global_null(alt)] {
            for rep in 0..40 {
                let run = simulate_replication(&spec, &designs, 31, rep).unwrap();
                for t in &run.traces {
                    check(t, &format!("{} rep {rep} {} {}", spec.name, t.design.label(), t.weights));
                }
            }
        }
    }
}

#[test]
fn gate_holds_when_both_populations_continue() {
    let setting = 2;
    let spec = presets::scenario(setting).unwrap();
    let designs = vec![presets::design(setting, DesignKind::Ggsd, presets::fixed_weight_sets()[4].clone())];
    let mut both = 0;
    for rep in 0..200 {
        let t = &simulate_replication(&spec, &designs, 5, rep).unwrap().traces[0];
        if t.scenario != Some(ggsd::combine::Scenario::Both) {
            continue;
        }
        both += 1;
        let first = |pop: Population| {
            HypothesisId::ALL
                .iter()
                .filter(|h| h.population == pop)
                .filter_map(|h| t.rejected_at[h.index()])
                .min()
        };
        if let Some(f) = first(Population::Full) {
            assert!(first(Population::Sub).is_some_and(|s| s <= f), "rep {rep}");
        }
        for rec in &t.analyses {
            for test in rec.tests.iter().filter(|x| x.confirmed) {
                assert!(!test.gated);
            }
        }
    }
    assert!(both > 100);
}

/// Pooled evidence of one replication as GSD sees it.
fn pooled_evidence(setting: u8, rep: u64) -> Vec<AnalysisEvidence> {
    let spec = presets::scenario(setting).unwrap();
    let records = replication_trial(&spec, 3, rep).unwrap();
    let (times, _) = schedule_analyses_capped(&records, &spec.triggers, Population::Full).unwrap();
    times
        .iter()
        .map(|&t| AnalysisEvidence::from_snapshot(&snapshot_at(&records, t).unwrap()))
        .collect()
}

#[test]
fn gsd_ignores_the_stage_split() {
    for setting in 1..=3u8 {
        let gsd = presets::design(setting, DesignKind::Gsd, presets::fixed_weight_sets()[4].clone());
        for rep in 0..20 {
            let ev = pooled_evidence(setting, rep);
            let base = run_selected(&gsd, None, &ev).unwrap();
            let swapped: Vec<AnalysisEvidence> = ev
                .iter()
                .map(|a| {
                    let mut b = a.clone();
                    for e in Endpoint::BOTH {
                        for slot in [Slot::Full, Slot::Sub] {
                            let p1 = a.cohorts.get(1, e, slot).unwrap();
                            let p2 = a.cohorts.get(2, e, slot).unwrap();
                            b.cohorts.set(1, e, slot, p2).unwrap();
                            b.cohorts.set(2, e, slot, p1).unwrap();
                        }
                    }
                    b.events = b.events.map(|mut s| {
                        s.0.swap(0, 1);
                        s
                    });
                    b
                })
                .collect();
            assert_eq!(run_selected(&gsd, None, &swapped).unwrap(), base);
            let stripped: Vec<AnalysisEvidence> = ev
                .iter()
                .map(|a| AnalysisEvidence { pooled: a.pooled, ..AnalysisEvidence::default() })
                .collect();
            assert_eq!(run_selected(&gsd, None, &stripped).unwrap(), base);
        }
    }
}

/// Evidence built from one p-value per hypothesis and analysis, used both
/// pooled and as the combined statistic.
fn synthetic(ps: &[[f64; 4]; 3]) -> Vec<AnalysisEvidence> {
    ps.iter()
        .map(|row| AnalysisEvidence {
            pooled: row.map(Some),
            direct: row.map(Some),
            ..AnalysisEvidence::default()
        })
        .collect()
}

fn designs() -> Vec<DesignSpec> {
    let w = presets::fixed_weight_sets()[4].clone();
    [DesignKind::Gsd, DesignKind::Ad, DesignKind::Ggsd]
        .into_iter()
        .map(|k| presets::design(2, k, w.clone()))
        .collect()
}

fn arb_p() -> impl Strategy<Value = f64> {
    (-5.0f64..-0.3).prop_map(|x| 10f64.powf(x))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, ..ProptestConfig::default() })]

    #[test]
    fn lowering_a_p_value_never_loses_a_rejection(
        ps in prop::array::uniform3(prop::array::uniform4(arb_p())),
        hrs in prop::sample::select(vec![(0.7, 0.7), (0.9, 0.7), (0.7, 0.95)]),
        k in 0usize..3,
        h in 0usize..4,
        factor in 0.0f64..1.0,
    ) {
        let mut lower = ps;
        lower[k][h] *= factor;
        for d in designs() {
            let before = run_design(&d, Some(hrs), &synthetic(&ps)).unwrap();
            let after = run_design(&d, Some(hrs), &synthetic(&lower)).unwrap();
            prop_assert!(before.invariant_violations(presets::ALPHA).is_empty());
            prop_assert!(after.invariant_violations(presets::ALPHA).is_empty());
            for id in HypothesisId::ALL {
                if before.rejected(id) {
                    prop_assert!(after.rejected(id), "{} lost {id}", d.kind.label());
                }
            }
        }
    }

    #[test]
    fn rejections_never_come_later_with_stronger_evidence(
        ps in prop::array::uniform3(prop::array::uniform4(arb_p())),
        factor in 0.0f64..1.0,
    ) {
        let lower = ps.map(|row| row.map(|p| p * factor));
        for d in designs() {
            let before = run_design(&d, Some((0.7, 0.7)), &synthetic(&ps)).unwrap();
            let after = run_design(&d, Some((0.7, 0.7)), &synthetic(&lower)).unwrap();
            for i in 0..4 {
                if let Some(k) = before.rejected_at[i] {
                    prop_assert!(after.rejected_at[i].is_some_and(|j| j <= k));
                }
            }
        }
    }
}
