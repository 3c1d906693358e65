//! Monte Carlo driver: replicate trials, run every design on each one and
//! aggregate familywise error, power and termination times.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::Scenario;
use crate::engine::{analysis_label, run_selected, AnalysisEvidence, DecisionTrace, DesignKind, DesignSpec};
use crate::error::{Error, Result};
use crate::multiplicity::{HypothesisId, Population};
use crate::simdata::{
    enrolled_under, generate_trial_with, replication_rng, schedule_analyses_capped, snapshot_at,
    stage1_cutoff_time, PatientRecord, ScenarioSpec,
};

/// How many hypotheses of a population must be rejected to count as a success.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerRule {
    #[default]
    Both,
    Any,
}

impl PowerRule {
    fn met(self, rejected: [bool; 2]) -> bool {
        match self {
            PowerRule::Both => rejected[0] && rejected[1],
            PowerRule::Any => rejected[0] || rejected[1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessOptions {
    /// Rule for the subgroup power.
    #[serde(default)]
    pub power_s: PowerRule,
    /// Rule applied within each population for the "S or F" power.
    #[serde(default)]
    pub power_sf: PowerRule,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Traces of every design on one replicated trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub traces: Vec<DecisionTrace>,
    /// Scheduling fallbacks and other data issues, per design.
    pub warnings: Vec<Vec<String>>,
}

/// The trial of replication `rep` under `seed`.
pub fn replication_trial(spec: &ScenarioSpec, seed: u64, rep: u64) -> Result<Vec<PatientRecord>> {
    let mut rng = replication_rng(seed, rep);
    generate_trial_with(spec, &mut rng)
}

fn evidence_for(
    records: &[PatientRecord],
    spec: &ScenarioSpec,
    population: Population,
) -> Result<(Vec<AnalysisEvidence>, Vec<String>)> {
    let (times, warnings) = schedule_analyses_capped(records, &spec.triggers, population)?;
    let evidence = times
        .iter()
        .map(|&t| snapshot_at(records, t).map(|s| AnalysisEvidence::from_snapshot(&s)))
        .collect::<Result<Vec<_>>>()?;
    Ok((evidence, warnings))
}

/// Generates replication `rep` and runs every design on it.
pub fn simulate_replication(
    spec: &ScenarioSpec,
    designs: &[DesignSpec],
    seed: u64,
    rep: u64,
) -> Result<Replication> {
    let records = replication_trial(spec, seed, rep)?;
    let mut pooled: Option<(Vec<AnalysisEvidence>, Vec<String>)> = None;
    let mut hrs: Option<(f64, f64, Vec<String>)> = None;
    let mut selected: HashMap<Scenario, (Vec<AnalysisEvidence>, Vec<String>)> = HashMap::new();
    let mut traces = Vec::with_capacity(designs.len());
    let mut warnings = Vec::with_capacity(designs.len());
    for design in designs {
        if !design.kind.is_adaptive() {
            if pooled.is_none() {
                pooled = Some(evidence_for(&records, spec, Population::Full)?);
            }
            let (ev, warn) = pooled.as_ref().expect("just computed");
            traces.push(run_selected(design, None, ev)?);
            warnings.push(warn.clone());
            continue;
        }
        if hrs.is_none() {
            let cutoff = stage1_cutoff_time(&records, spec)?;
            let snap = snapshot_at(&records, cutoff)?;
            let mut warn = Vec::new();
            let mut hr = |v: Option<f64>, pop: &str| {
                v.unwrap_or_else(|| {
                    warn.push(format!("stage-1 hazard ratio for {pop} not estimable"));
                    f64::INFINITY
                })
            };
            let f = hr(snap.hr_full, "F");
            let s = hr(snap.hr_sub, "S");
            hrs = Some((f, s, warn));
        }
        let (hf, hs, hr_warn) = hrs.as_ref().expect("just computed");
        let selection = design.select(*hf, *hs);
        let scenario = selection.and_then(|s| s.selection.scenario());
        let mut warn = hr_warn.clone();
        let trace = match scenario {
            None => run_selected(design, selection, &[])?,
            Some(sc) => {
                if !selected.contains_key(&sc) {
                    let realized = enrolled_under(&records, sc);
                    let driver = if sc == Scenario::SOnly { Population::Sub } else { Population::Full };
                    selected.insert(sc, evidence_for(&realized, spec, driver)?);
                }
                let (ev, w) = &selected[&sc];
                warn.extend(w.iter().cloned());
                run_selected(design, selection, ev)?
            }
        };
        traces.push(trace);
        warnings.push(warn);
    }
    Ok(Replication { traces, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Tally {
    reps: u64,
    fwer: u64,
    power_s: u64,
    power_sf: u64,
    termination: Vec<u64>,
    warned: u64,
}

impl Tally {
    fn zero(analyses: usize) -> Self {
        Self {
            reps: 0,
            fwer: 0,
            power_s: 0,
            power_sf: 0,
            termination: vec![0; analyses + 1],
            warned: 0,
        }
    }

    fn merge(mut self, other: &Tally) -> Self {
        self.reps += other.reps;
        self.fwer += other.fwer;
        self.power_s += other.power_s;
        self.power_sf += other.power_sf;
        for (a, b) in self.termination.iter_mut().zip(&other.termination) {
            *a += b;
        }
        self.warned += other.warned;
        self
    }
}

/// Success flags of one trace under the given rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOutcome {
    pub any_true_null_rejected: bool,
    pub power_s: bool,
    pub power_sf: bool,
}

pub fn score_trace(trace: &DecisionTrace, true_nulls: &[HypothesisId], opts: &HarnessOptions) -> TraceOutcome {
    let pair = |pop: Population| {
        [
            trace.rejected(HypothesisId::new(pop, crate::multiplicity::Endpoint::Pfs)),
            trace.rejected(HypothesisId::new(pop, crate::multiplicity::Endpoint::Os)),
        ]
    };
    let full_is_null = true_nulls.iter().any(|h| h.population == Population::Full);
    let power_s = opts.power_s.met(pair(Population::Sub));
    let power_sf = opts.power_sf.met(pair(Population::Sub))
        || (!full_is_null && opts.power_sf.met(pair(Population::Full)));
    TraceOutcome {
        any_true_null_rejected: true_nulls.iter().any(|&h| trace.rejected(h)),
        power_s,
        power_sf,
    }
}

/// Aggregate results of one design in one setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub setting: String,
    pub design: DesignKind,
    pub weights: String,
    pub reps: u64,
    pub seed: u64,
    /// True nulls, `;`-separated; empty when there are none.
    pub true_nulls: String,
    /// Replications rejecting at least one true null; `None` without true nulls.
    pub fwer_count: Option<u64>,
    pub rule_s: PowerRule,
    pub power_s_count: u64,
    pub rule_sf: PowerRule,
    pub power_sf_count: u64,
    /// Counts per stage: futility, IA1, ..., FA.
    pub termination: Vec<(String, u64)>,
    pub warned_reps: u64,
}

fn rate(count: u64, n: u64) -> f64 {
    count as f64 / n as f64
}

fn std_error(count: u64, n: u64) -> f64 {
    let p = rate(count, n);
    (p * (1.0 - p) / n as f64).sqrt()
}

impl DesignSummary {
    pub fn fwer(&self) -> Option<f64> {
        self.fwer_count.map(|c| rate(c, self.reps))
    }

    pub fn fwer_se(&self) -> Option<f64> {
        self.fwer_count.map(|c| std_error(c, self.reps))
    }

    pub fn power_s(&self) -> f64 {
        rate(self.power_s_count, self.reps)
    }

    pub fn power_s_se(&self) -> f64 {
        std_error(self.power_s_count, self.reps)
    }

    pub fn power_sf(&self) -> f64 {
        rate(self.power_sf_count, self.reps)
    }

    pub fn power_sf_se(&self) -> f64 {
        std_error(self.power_sf_count, self.reps)
    }

    /// Fraction of replications ending at the given stage label.
    pub fn termination_fraction(&self, stage: &str) -> f64 {
        self.termination
            .iter()
            .find(|(s, _)| s == stage)
            .map_or(0.0, |(_, c)| rate(*c, self.reps))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub rows: Vec<DesignSummary>,
}

impl SimulationReport {
    pub fn find(&self, design: DesignKind, weights: &str) -> Option<&DesignSummary> {
        self.rows
            .iter()
            .find(|r| r.design == design && (design == DesignKind::Gsd || r.weights == weights))
    }
}

fn weights_label(design: &DesignSpec) -> String {
    if design.kind.is_adaptive() {
        design.weights.label().to_string()
    } else {
        "-".to_string()
    }
}

/// Runs `n_rep` replications of `spec` for every design.
pub fn run_monte_carlo(
    spec: &ScenarioSpec,
    designs: &[DesignSpec],
    n_rep: u64,
    seed: u64,
    opts: &HarnessOptions,
) -> Result<SimulationReport> {
    if n_rep == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    spec.validate()?;
    if designs.is_empty() {
        return Err(Error::Config("no designs to simulate".into()));
    }
    for d in designs {
        d.validate()?;
        if d.schedule.analyses != spec.triggers.len() {
            return Err(Error::Config(format!(
                "{} plans {} analyses but the scenario has {} triggers",
                d.kind.label(),
                d.schedule.analyses,
                spec.triggers.len()
            )));
        }
    }
    let true_nulls = spec.true_nulls();
    let zero: Vec<Tally> = designs.iter().map(|d| Tally::zero(d.schedule.analyses)).collect();
    let tally_rep = |rep: u64| -> Result<Vec<Tally>> {
        let r = simulate_replication(spec, designs, seed, rep)?;
        Ok(r
            .traces
            .iter()
            .zip(&r.warnings)
            .zip(designs)
            .map(|((trace, warn), d)| {
                let out = score_trace(trace, &true_nulls, opts);
                let mut t = Tally::zero(d.schedule.analyses);
                t.reps = 1;
                t.fwer = out.any_true_null_rejected as u64;
                t.power_s = out.power_s as u64;
                t.power_sf = out.power_sf as u64;
                t.termination[trace.termination.analysis.unwrap_or(0)] = 1;
                t.warned = (!warn.is_empty() || !trace.warnings.is_empty()) as u64;
                t
            })
            .collect())
    };
    let merge = |a: Vec<Tally>, b: Vec<Tally>| -> Vec<Tally> {
        a.into_iter().zip(&b).map(|(x, y)| x.merge(y)).collect()
    };
    let run = || {
        (0..n_rep)
            .into_par_iter()
            .map(tally_rep)
            .try_reduce(|| zero.clone(), |a, b| Ok(merge(a, b)))
    };
    let tallies = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let null_labels: Vec<String> = true_nulls.iter().map(|h| h.label()).collect();
    let rows = designs
        .iter()
        .zip(tallies)
        .map(|(d, t)| {
            let k = d.schedule.analyses;
            let termination = t
                .termination
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let label = if i == 0 { "futility".to_string() } else { analysis_label(i, k) };
                    (label, c)
                })
                .collect();
            DesignSummary {
                setting: spec.name.clone(),
                design: d.kind,
                weights: weights_label(d),
                reps: t.reps,
                seed,
                true_nulls: null_labels.join(";"),
                fwer_count: (!true_nulls.is_empty()).then_some(t.fwer),
                rule_s: opts.power_s,
                power_s_count: t.power_s,
                rule_sf: opts.power_sf,
                power_sf_count: t.power_sf,
                termination,
                warned_reps: t.warned,
            }
        })
        .collect();
    Ok(SimulationReport { rows })
}

#[derive(Debug, Serialize, Deserialize)]
struct FwerRow {
    setting: String,
    design: DesignKind,
    weights: String,
    reps: u64,
    seed: u64,
    true_nulls: String,
    rejections: Option<u64>,
    fwer: Option<f64>,
    se: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PowerRow {
    setting: String,
    design: DesignKind,
    weights: String,
    reps: u64,
    seed: u64,
    rule_s: PowerRule,
    power_s_count: u64,
    power_s: f64,
    power_s_se: f64,
    rule_sf: PowerRule,
    power_sf_count: u64,
    power_sf: f64,
    power_sf_se: f64,
    warned_reps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TerminationRow {
    setting: String,
    design: DesignKind,
    weights: String,
    reps: u64,
    seed: u64,
    stage: String,
    count: u64,
    fraction: f64,
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv write failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str, name: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Data(format!("{name}: {e}")))
}

/// The three result tables as comma-separated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tables {
    pub fwer: String,
    pub power: String,
    pub termination: String,
}

/// Long-format tables keyed by (setting, design, weights).
pub fn summarize(reports: &[SimulationReport]) -> Result<Tables> {
    let rows: Vec<&DesignSummary> = reports.iter().flat_map(|r| &r.rows).collect();
    if rows.is_empty() {
        return Err(Error::Data("nothing to summarize".into()));
    }
    let fwer = to_csv(rows.iter().map(|r| FwerRow {
        setting: r.setting.clone(),
        design: r.design,
        weights: r.weights.clone(),
        reps: r.reps,
        seed: r.seed,
        true_nulls: r.true_nulls.clone(),
        rejections: r.fwer_count,
        fwer: r.fwer(),
        se: r.fwer_se(),
    }))?;
    let power = to_csv(rows.iter().map(|r| PowerRow {
        setting: r.setting.clone(),
        design: r.design,
        weights: r.weights.clone(),
        reps: r.reps,
        seed: r.seed,
        rule_s: r.rule_s,
        power_s_count: r.power_s_count,
        power_s: r.power_s(),
        power_s_se: r.power_s_se(),
        rule_sf: r.rule_sf,
        power_sf_count: r.power_sf_count,
        power_sf: r.power_sf(),
        power_sf_se: r.power_sf_se(),
        warned_reps: r.warned_reps,
    }))?;
    let termination = to_csv(rows.iter().flat_map(|r| {
        r.termination.iter().map(move |(stage, count)| TerminationRow {
            setting: r.setting.clone(),
            design: r.design,
            weights: r.weights.clone(),
            reps: r.reps,
            seed: r.seed,
            stage: stage.clone(),
            count: *count,
            fraction: rate(*count, r.reps),
        })
    }))?;
    Ok(Tables { fwer, power, termination })
}

/// Rebuilds the summaries from the three tables written by [`summarize`].
pub fn read_tables(tables: &Tables) -> Result<Vec<DesignSummary>> {
    let fwer: Vec<FwerRow> = from_csv(&tables.fwer, "fwer table")?;
    let power: Vec<PowerRow> = from_csv(&tables.power, "power table")?;
    let term: Vec<TerminationRow> = from_csv(&tables.termination, "termination table")?;
    if fwer.len() != power.len() {
        return Err(Error::Data(format!(
            "fwer table has {} rows but power table has {}",
            fwer.len(),
            power.len()
        )));
    }
    let mut out = Vec::with_capacity(fwer.len());
    for (f, p) in fwer.into_iter().zip(power) {
        if (&f.setting, f.design, &f.weights) != (&p.setting, p.design, &p.weights) {
            return Err(Error::Data(format!(
                "row mismatch: {} {} {} vs {} {} {}",
                f.setting,
                f.design.label(),
                f.weights,
                p.setting,
                p.design.label(),
                p.weights
            )));
        }
        let termination = term
            .iter()
            .filter(|t| t.setting == f.setting && t.design == f.design && t.weights == f.weights)
            .map(|t| (t.stage.clone(), t.count))
            .collect();
        out.push(DesignSummary {
            setting: f.setting,
            design: f.design,
            weights: f.weights,
            reps: f.reps,
            seed: f.seed,
            true_nulls: f.true_nulls,
            fwer_count: f.rejections,
            rule_s: p.rule_s,
            power_s_count: p.power_s_count,
            rule_sf: p.rule_sf,
            power_sf_count: p.power_sf_count,
            termination,
            warned_reps: p.warned_reps,
        });
    }
    Ok(out)
}
