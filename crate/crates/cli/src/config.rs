//! Run configuration: a TOML document with one optional section per
//! concern. Loading validates everything and reports every problem found,
//! each prefixed with the path of the offending field.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ggsd::boundaries::SpendingFunction;
use ggsd::combine::{CohortPValues, Slot, StageWeights, WeightSet, WeightTable};
use ggsd::engine::{AnalysisEvidence, DesignKind, DesignSpec, Schedule, StageEvents};
use ggsd::futility::{calibrate_threshold, Calibration, FutilityRule};
use ggsd::harness::{HarnessOptions, PowerRule};
use ggsd::multiplicity::{within_population_transitions, Endpoint, HypothesisId, Population};
use ggsd::simdata::ScenarioSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 2024;
pub const DEFAULT_REPS: u64 = 2000;

/// Values keyed by hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerHypothesis<T> {
    pub f_os: T,
    pub f_pfs: T,
    pub s_os: T,
    pub s_pfs: T,
}

impl<T: Clone> PerHypothesis<T> {
    fn entries(&self) -> [(HypothesisId, &'static str, &T); 4] {
        [
            (HypothesisId::new(Population::Full, Endpoint::Os), "f_os", &self.f_os),
            (HypothesisId::new(Population::Full, Endpoint::Pfs), "f_pfs", &self.f_pfs),
            (HypothesisId::new(Population::Sub, Endpoint::Os), "s_os", &self.s_os),
            (HypothesisId::new(Population::Sub, Endpoint::Pfs), "s_pfs", &self.s_pfs),
        ]
    }

    /// Values in engine order.
    pub fn to_array(&self) -> [T; 4] {
        let e = self.entries();
        let mut out: [Option<T>; 4] = [None, None, None, None];
        for (h, _, v) in e {
            out[h.index()] = Some(v.clone());
        }
        out.map(|v| v.expect("every hypothesis listed"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaTable {
    #[serde(rename = "GSD", default)]
    pub gsd: Option<PerHypothesis<f64>>,
    #[serde(rename = "AD", default)]
    pub ad: Option<PerHypothesis<f64>>,
    #[serde(rename = "gGSD", default)]
    pub ggsd: Option<PerHypothesis<f64>>,
}

impl AlphaTable {
    fn get(&self, kind: DesignKind) -> Option<&PerHypothesis<f64>> {
        match kind {
            DesignKind::Gsd => self.gsd.as_ref(),
            DesignKind::Ad => self.ad.as_ref(),
            DesignKind::Ggsd => self.ggsd.as_ref(),
        }
    }
}

/// Either a named graph or an explicit matrix of transition weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Transitions {
    Named(String),
    Matrix(PerHypothesis<PerHypothesis<f64>>),
}

impl Default for Transitions {
    fn default() -> Self {
        Transitions::Named("within_population".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub spending: SpendingFunction,
    pub schedule: Schedule,
    pub fractions: PerHypothesis<Vec<f64>>,
    pub alphas: AlphaTable,
    #[serde(default)]
    pub transitions: Transitions,
    /// Designs that use the special graph when one population continues.
    #[serde(default = "default_special")]
    pub special_graph: Vec<DesignKind>,
}

fn default_alpha() -> f64 {
    0.025
}

fn default_special() -> Vec<DesignKind> {
    vec![DesignKind::Ggsd]
}

fn all_kinds() -> Vec<DesignKind> {
    DesignKind::ALL.to_vec()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FutilitySection {
    pub theta_full: Option<f64>,
    pub theta_sub: Option<f64>,
    pub calibration_full: Option<Calibration>,
    pub calibration_sub: Option<Calibration>,
}

/// A stage-1 weight given as its square, or as the pair (w1, w2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Square(f64),
    Pair([f64; 2]),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub label: Option<String>,
    #[serde(default)]
    pub event_driven: bool,
    pub pfs: Option<WeightSpec>,
    pub os: Option<WeightSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSection {
    #[serde(default)]
    pub s: PowerRule,
    #[serde(default)]
    pub sf: PowerRule,
}

/// Observed evidence for one slot: a combined p-value `p`, or the stage-wise
/// pair `p1`/`p2` with optional stage event counts `n1`/`n2`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotInput {
    pub p: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub n1: Option<f64>,
    pub n2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PooledInput {
    pub f_os: Option<f64>,
    pub f_pfs: Option<f64>,
    pub s_os: Option<f64>,
    pub s_pfs: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedAnalysis {
    #[serde(default)]
    pub pooled: PooledInput,
    pub f_os: Option<SlotInput>,
    pub f_pfs: Option<SlotInput>,
    pub s_os: Option<SlotInput>,
    pub s_pfs: Option<SlotInput>,
    pub fs_os: Option<SlotInput>,
    pub fs_pfs: Option<SlotInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedSection {
    pub hr_full: f64,
    pub hr_sub: f64,
    pub analyses: Vec<ObservedAnalysis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Output directories of earlier `simulate` runs, relative to the
    /// configuration file.
    pub inputs: Vec<PathBuf>,
}

/// The document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub reps: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub scenario: Option<ScenarioSpec>,
    #[serde(default = "all_kinds")]
    pub designs: Vec<DesignKind>,
    pub design: Option<DesignSection>,
    pub futility: Option<FutilitySection>,
    #[serde(default)]
    pub weights: Vec<WeightEntry>,
    #[serde(default)]
    pub power: PowerSection,
    pub observed: Option<ObservedSection>,
    pub report: Option<ReportSection>,
}

/// Observed inputs ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub hr_full: f64,
    pub hr_sub: f64,
    pub evidence: Vec<AnalysisEvidence>,
}

/// A fully validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub reps: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub scenario: Option<ScenarioSpec>,
    /// GSD once, then each adaptive design under every weight set.
    pub designs: Vec<DesignSpec>,
    pub futility: Option<FutilityRule>,
    pub options: HarnessOptions,
    pub observed: Option<Observed>,
    pub report_inputs: Vec<PathBuf>,
    /// Exact text the configuration was parsed from.
    pub text: String,
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_str(&text, base)
}

/// Parses configuration text; relative paths resolve against `base`.
pub fn parse_str(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    if text.trim().is_empty() {
        return Err(CliError::Syntax("configuration is empty".into()));
    }
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Syntax(e.to_string()))?;
    let mut problems = Problems::default();
    let cfg = build(&raw, text, base, &mut problems);
    if problems.0.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Invalid(problems.0))
    }
}

#[derive(Default)]
struct Problems(Vec<String>);

impl Problems {
    fn push(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{path}: {msg}"));
    }

    /// Splits a core validation message into one problem per clause.
    fn absorb(&mut self, path: &str, err: ggsd::Error) {
        let text = match err {
            ggsd::Error::Config(m) => m,
            other => other.to_string(),
        };
        for part in text.split("; ") {
            self.push(path, part);
        }
    }
}

fn build(raw: &RawConfig, text: &str, base: &Path, problems: &mut Problems) -> RunConfig {
    if raw.reps == Some(0) {
        problems.push("reps", "must be at least 1");
    }
    if raw.threads == Some(0) {
        problems.push("threads", "must be at least 1");
    }
    if let Some(s) = &raw.scenario {
        if let Err(e) = s.validate() {
            problems.absorb("scenario", e);
        }
    }
    let futility = raw.futility.as_ref().and_then(|f| futility_rule(f, problems));
    let analyses = raw.design.as_ref().map_or(1, |d| d.schedule.analyses.max(1));
    let weight_sets = weight_sets(&raw.weights, analyses, problems);
    let designs = raw
        .design
        .as_ref()
        .map(|d| designs(raw, d, futility.as_ref(), &weight_sets, problems))
        .unwrap_or_default();
    if let (Some(s), Some(d)) = (&raw.scenario, &raw.design) {
        if s.triggers.len() != d.schedule.analyses {
            problems.push(
                "scenario.triggers",
                format!("{} triggers for {} planned analyses", s.triggers.len(), d.schedule.analyses),
            );
        }
    }
    let observed = raw.observed.as_ref().and_then(|o| {
        let analyses = raw.design.as_ref().map(|d| d.schedule.analyses);
        observed(o, analyses, problems)
    });
    RunConfig {
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        reps: raw.reps.unwrap_or(DEFAULT_REPS),
        out: raw.out.clone().map(|p| base.join(p)).unwrap_or_else(|| PathBuf::from("out")),
        threads: raw.threads,
        scenario: raw.scenario.clone(),
        designs,
        futility,
        options: HarnessOptions {
            power_s: raw.power.s,
            power_sf: raw.power.sf,
            threads: raw.threads,
        },
        observed,
        report_inputs: raw
            .report
            .as_ref()
            .map(|r| r.inputs.iter().map(|p| base.join(p)).collect())
            .unwrap_or_default(),
        text: text.to_string(),
    }
}

fn futility_rule(f: &FutilitySection, problems: &mut Problems) -> Option<FutilityRule> {
    let mut theta = |name: &str, given: Option<f64>, cal: Option<Calibration>| -> Option<f64> {
        match (given, cal) {
            (Some(t), _) => Some(t),
            (None, Some(c)) => match calibrate_threshold(c.assumed_hr, c.events, c.gamma) {
                Ok(t) => Some(t),
                Err(e) => {
                    problems.push(&format!("futility.calibration_{name}"), e);
                    None
                }
            },
            (None, None) => {
                problems.push(&format!("futility.theta_{name}"), format!("give theta_{name} or calibration_{name}"));
                None
            }
        }
    };
    let full = theta("full", f.theta_full, f.calibration_full);
    let sub = theta("sub", f.theta_sub, f.calibration_sub);
    let rule = FutilityRule {
        theta_full: full?,
        theta_sub: sub?,
        calibration_full: f.calibration_full,
        calibration_sub: f.calibration_sub,
    };
    match rule.validate() {
        Ok(()) => Some(rule),
        Err(e) => {
            problems.absorb("futility", e);
            None
        }
    }
}

fn stage_weights(path: &str, spec: WeightSpec, problems: &mut Problems) -> Option<StageWeights> {
    let made = match spec {
        WeightSpec::Square(s) if (0.0..=1.0).contains(&s) => StageWeights::from_squares(s, 1.0 - s),
        WeightSpec::Square(s) => {
            problems.push(path, format!("squared stage-1 weight must lie in [0, 1], got {s}"));
            return None;
        }
        WeightSpec::Pair([w1, w2]) => StageWeights::new(w1, w2),
    };
    match made {
        Ok(w) => Some(w),
        Err(e) => {
            problems.push(path, e);
            None
        }
    }
}

fn square_label(spec: WeightSpec) -> String {
    let sq = match spec {
        WeightSpec::Square(s) => s,
        WeightSpec::Pair([w1, _]) => w1 * w1,
    };
    let text = format!("{:.4}", sq);
    text.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn weight_sets(entries: &[WeightEntry], analyses: usize, problems: &mut Problems) -> Vec<WeightSet> {
    if entries.is_empty() {
        return vec![WeightSet::EventDriven];
    }
    let mut out = Vec::new();
    let mut labels = BTreeSet::new();
    for (i, entry) in entries.iter().enumerate() {
        let path = format!("weights[{i}]");
        let set = if entry.event_driven {
            if entry.pfs.is_some() || entry.os.is_some() {
                problems.push(&path, "event-driven weights take no pfs or os values");
                continue;
            }
            WeightSet::EventDriven
        } else {
            let (Some(pfs), Some(os)) = (entry.pfs, entry.os) else {
                problems.push(&path, "fixed weights need both pfs and os");
                continue;
            };
            let wp = stage_weights(&format!("{path}.pfs"), pfs, problems);
            let wo = stage_weights(&format!("{path}.os"), os, problems);
            let (Some(wp), Some(wo)) = (wp, wo) else { continue };
            let label = entry.label.clone().unwrap_or_else(|| {
                let (lp, lo) = (square_label(pfs), square_label(os));
                if lp == lo {
                    lp
                } else {
                    format!("{lp}|{lo}")
                }
            });
            WeightSet::Fixed {
                label,
                table: WeightTable::constant(wp, wo, analyses),
            }
        };
        let label = match (&set, &entry.label) {
            (WeightSet::EventDriven, Some(l)) => l.clone(),
            _ => set.label().to_string(),
        };
        if !labels.insert(label.clone()) {
            problems.push(&path, format!("duplicate weight label {label:?}"));
        }
        out.push(set);
    }
    out
}

fn transitions(t: &Transitions, problems: &mut Problems) -> [[f64; 4]; 4] {
    match t {
        Transitions::Named(name) if name == "within_population" => within_population_transitions(),
        Transitions::Named(name) => {
            problems.push(
                "design.transitions",
                format!("unknown graph {name:?}; use \"within_population\" or a matrix"),
            );
            within_population_transitions()
        }
        Transitions::Matrix(m) => m.to_array().map(|row| row.to_array()),
    }
}

fn designs(
    raw: &RawConfig,
    d: &DesignSection,
    futility: Option<&FutilityRule>,
    weight_sets: &[WeightSet],
    problems: &mut Problems,
) -> Vec<DesignSpec> {
    let mut kinds = BTreeSet::new();
    for k in &raw.designs {
        if !kinds.insert(*k) {
            problems.push("designs", format!("{} listed twice", k.label()));
        }
    }
    if raw.designs.is_empty() {
        problems.push("designs", "list at least one design");
    }
    for (_, key, v) in d.fractions.entries() {
        if v.is_empty() {
            problems.push(&format!("design.fractions.{key}"), "needs at least one fraction");
        }
    }
    let graph = transitions(&d.transitions, problems);
    let needs_futility = raw.designs.iter().any(|k| k.is_adaptive());
    if needs_futility && futility.is_none() && raw.futility.is_none() {
        problems.push("futility", "missing; required by the adaptive designs");
    }
    let base = |kind: DesignKind, alphas: [f64; 4], weights: WeightSet| DesignSpec {
        kind,
        alpha: d.alpha,
        alphas,
        transitions: graph,
        spending: d.spending.clone(),
        fractions: d.fractions.to_array(),
        schedule: d.schedule.clone(),
        weights,
        futility: kind.is_adaptive().then(|| futility.copied()).flatten(),
        special_graph: d.special_graph.contains(&kind),
    };
    let mut alphas = [None; 3];
    for (i, kind) in DesignKind::ALL.into_iter().enumerate() {
        if !kinds.contains(&kind) {
            continue;
        }
        match d.alphas.get(kind) {
            Some(a) => alphas[i] = Some(a.to_array()),
            None => problems.push(
                &format!("design.alphas.{}", kind.label()),
                format!("missing; required because designs lists {}", kind.label()),
            ),
        }
    }
    let check = |spec: &DesignSpec, problems: &mut Problems| {
        // A missing or broken rule is reported under its own section; check
        // the rest of the design against a stand-in.
        let mut spec = spec.clone();
        if spec.kind.is_adaptive() && spec.futility.is_none() {
            spec.futility = FutilityRule::new(1.0, 1.0).ok();
        }
        if let Err(e) = spec.validate() {
            problems.absorb(&format!("design ({})", spec.kind.label()), e);
        }
    };
    // GSD once, then AD and gGSD per weight set.
    let mut out = Vec::new();
    if let Some(a) = alphas[0] {
        let spec = base(DesignKind::Gsd, a, weight_sets.first().cloned().unwrap_or(WeightSet::EventDriven));
        check(&spec, problems);
        out.push(spec);
    }
    for (i, w) in weight_sets.iter().enumerate() {
        for (kind, a) in [(DesignKind::Ad, alphas[1]), (DesignKind::Ggsd, alphas[2])] {
            let Some(a) = a else { continue };
            let spec = base(kind, a, w.clone());
            if i == 0 {
                check(&spec, problems);
            }
            out.push(spec);
        }
    }
    out
}

fn slot_evidence(
    path: &str,
    input: &SlotInput,
    endpoint: Endpoint,
    slot: Slot,
    ev: &mut AnalysisEvidence,
    problems: &mut Problems,
) {
    let in_unit = |p: f64| (0.0..=1.0).contains(&p);
    match (input.p, input.p1, input.p2) {
        (Some(p), None, None) => {
            if !in_unit(p) {
                problems.push(&format!("{path}.p"), format!("must lie in [0, 1], got {p}"));
                return;
            }
            if input.n1.is_some() || input.n2.is_some() {
                problems.push(path, "event counts apply only to stage-wise p1/p2 inputs");
            }
            match slot {
                Slot::Intersection => ev.direct_intersection[usize::from(endpoint == Endpoint::Os)] = Some(p),
                Slot::Full => ev.direct[HypothesisId::new(Population::Full, endpoint).index()] = Some(p),
                Slot::Sub => ev.direct[HypothesisId::new(Population::Sub, endpoint).index()] = Some(p),
            }
        }
        (None, Some(p1), Some(p2)) => {
            for (stage, p, key) in [(1u8, p1, "p1"), (2u8, p2, "p2")] {
                if let Err(e) = ev.cohorts.set(stage, endpoint, slot, p) {
                    problems.push(&format!("{path}.{key}"), e);
                }
            }
            match (input.n1, input.n2, slot) {
                (None, None, _) => {}
                (Some(n1), Some(n2), Slot::Full | Slot::Sub) if n1 >= 0.0 && n2 >= 0.0 => {
                    let pop = if slot == Slot::Full { Population::Full } else { Population::Sub };
                    let events = ev.events.get_or_insert_with(StageEvents::default);
                    events.set(1, pop, endpoint, n1);
                    events.set(2, pop, endpoint, n2);
                }
                (_, _, Slot::Intersection) => {
                    problems.push(path, "intersection weights follow the F event counts; drop n1/n2")
                }
                _ => problems.push(path, "give both n1 and n2 as nonnegative counts"),
            }
        }
        _ => problems.push(path, "give either p or both p1 and p2"),
    }
}

fn observed(o: &ObservedSection, analyses: Option<usize>, problems: &mut Problems) -> Option<Observed> {
    for (name, hr) in [("hr_full", o.hr_full), ("hr_sub", o.hr_sub)] {
        if !(hr > 0.0) {
            problems.push(&format!("observed.{name}"), format!("must be positive, got {hr}"));
        }
    }
    if let Some(k) = analyses {
        if o.analyses.len() != k {
            problems.push(
                "observed.analyses",
                format!("{} entries for {k} planned analyses", o.analyses.len()),
            );
        }
    }
    let before = problems.0.len();
    let mut evidence = Vec::with_capacity(o.analyses.len());
    for (i, a) in o.analyses.iter().enumerate() {
        let path = format!("observed.analyses[{i}]");
        let mut ev = AnalysisEvidence {
            cohorts: CohortPValues::new(),
            ..AnalysisEvidence::default()
        };
        let pooled = [
            (HypothesisId::new(Population::Full, Endpoint::Os), "f_os", a.pooled.f_os),
            (HypothesisId::new(Population::Full, Endpoint::Pfs), "f_pfs", a.pooled.f_pfs),
            (HypothesisId::new(Population::Sub, Endpoint::Os), "s_os", a.pooled.s_os),
            (HypothesisId::new(Population::Sub, Endpoint::Pfs), "s_pfs", a.pooled.s_pfs),
        ];
        for (h, key, p) in pooled {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    problems.push(&format!("{path}.pooled.{key}"), format!("must lie in [0, 1], got {p}"));
                }
                ev.pooled[h.index()] = Some(p);
            }
        }
        let slots = [
            ("f_os", &a.f_os, Endpoint::Os, Slot::Full),
            ("f_pfs", &a.f_pfs, Endpoint::Pfs, Slot::Full),
            ("s_os", &a.s_os, Endpoint::Os, Slot::Sub),
            ("s_pfs", &a.s_pfs, Endpoint::Pfs, Slot::Sub),
            ("fs_os", &a.fs_os, Endpoint::Os, Slot::Intersection),
            ("fs_pfs", &a.fs_pfs, Endpoint::Pfs, Slot::Intersection),
        ];
        for (key, input, e, slot) in slots {
            if let Some(input) = input {
                slot_evidence(&format!("{path}.{key}"), input, e, slot, &mut ev, problems);
            }
        }
        evidence.push(ev);
    }
    (problems.0.len() == before).then(|| Observed {
        hr_full: o.hr_full,
        hr_sub: o.hr_sub,
        evidence,
    })
}

impl RunConfig {
    /// Applies command-line overrides.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        reps: Option<u64>,
        out: Option<PathBuf>,
        threads: Option<usize>,
    ) -> Result<Self, CliError> {
        let mut problems = Vec::new();
        if reps == Some(0) {
            problems.push("--reps: must be at least 1".to_string());
        }
        if threads == Some(0) {
            problems.push("--threads: must be at least 1".to_string());
        }
        if !problems.is_empty() {
            return Err(CliError::Invalid(problems));
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(r) = reps {
            self.reps = r;
        }
        if let Some(o) = out {
            self.out = o;
        }
        if threads.is_some() {
            self.threads = threads;
            self.options.threads = threads;
        }
        Ok(self)
    }
}
