//! Per-trial decision engines for the group sequential (GSD), adaptive
//! (AD) and gated group sequential (gGSD) designs.
//!
//! Analyses are numbered from 1; the last planned analysis is the final
//! analysis (FA), earlier ones are interim analyses IA1, IA2, ...

use std::fmt::Write as _;
use std::sync::{Arc, LazyLock};

use serde::{Deserialize, Serialize};

use crate::boundaries::{validate_fractions, BoundaryCache, BoundarySet, SpendingFunction};
use crate::combine::{
    event_weights, inverse_normal, scenario_wiring, CohortPValues, Scenario, StageWeights, TestTarget, WeightSet,
    P_CLAMP,
};
use crate::error::{Error, Result};
use crate::futility::{select_population, FutilityRule, Selection, SelectionDecision};
use crate::multiplicity::{
    hochberg_intersection, ClosedFamily, Endpoint, HypothesisGraph, HypothesisId, Population,
    ALPHA_SLACK,
};
use crate::numerics::{norm_quantile, norm_sf};
use crate::simdata::{AnalysisSnapshot, Cohort};

static SHARED_CACHE: LazyLock<BoundaryCache> = LazyLock::new(BoundaryCache::new);

/// Boundary cache shared by every engine run in the process.
pub fn shared_cache() -> &'static BoundaryCache {
    &SHARED_CACHE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DesignKind {
    #[serde(rename = "GSD", alias = "gsd")]
    Gsd,
    #[serde(rename = "AD", alias = "ad")]
    Ad,
    #[serde(rename = "gGSD", alias = "ggsd")]
    Ggsd,
}

impl DesignKind {
    pub const ALL: [DesignKind; 3] = [DesignKind::Gsd, DesignKind::Ad, DesignKind::Ggsd];

    pub fn label(self) -> &'static str {
        match self {
            DesignKind::Gsd => "GSD",
            DesignKind::Ad => "AD",
            DesignKind::Ggsd => "gGSD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DesignKind::ALL
            .into_iter()
            .find(|d| d.label().eq_ignore_ascii_case(s))
    }

    pub fn is_adaptive(self) -> bool {
        self != DesignKind::Gsd
    }
}

/// Analyses at which each endpoint is tested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub analyses: usize,
    pub pfs: Vec<usize>,
    pub os: Vec<usize>,
}

impl Schedule {
    pub fn looks(&self, e: Endpoint) -> &[usize] {
        match e {
            Endpoint::Pfs => &self.pfs,
            Endpoint::Os => &self.os,
        }
    }

    /// Position of analysis `k` among the looks of `e`.
    pub fn look_index(&self, e: Endpoint, k: usize) -> Option<usize> {
        self.looks(e).iter().position(|&a| a == k)
    }

    pub fn tests(&self, e: Endpoint, k: usize) -> bool {
        self.look_index(e, k).is_some()
    }

    fn validate(&self, problems: &mut Vec<String>) {
        if self.analyses == 0 {
            problems.push("schedule needs at least one analysis".into());
        }
        for e in Endpoint::BOTH {
            let looks = self.looks(e);
            if looks.is_empty() {
                problems.push(format!("schedule tests {} at no analysis", e.label()));
            }
            if looks.windows(2).any(|w| w[0] >= w[1]) || looks.iter().any(|&k| k == 0 || k > self.analyses) {
                problems.push(format!(
                    "{} analyses must be increasing and within 1..={}",
                    e.label(),
                    self.analyses
                ));
            }
        }
    }
}

pub fn analysis_label(k: usize, total: usize) -> String {
    if k == total {
        "FA".to_string()
    } else {
        format!("IA{k}")
    }
}

/// A fully pre-specified design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub alpha: f64,
    /// Initial alphas in the order F-OS, F-PFS, S-OS, S-PFS.
    pub alphas: [f64; 4],
    pub transitions: [[f64; 4]; 4],
    pub spending: SpendingFunction,
    /// Planned information fractions per hypothesis over its looks.
    pub fractions: [Vec<f64>; 4],
    pub schedule: Schedule,
    pub weights: WeightSet,
    pub futility: Option<FutilityRule>,
    /// Under a single selected population, test PFS at the full alpha and
    /// pass it to OS on rejection.
    pub special_graph: bool,
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            problems.push(format!("alpha must lie in (0, 0.5), got {}", self.alpha));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) {
            problems.push("initial alphas must be nonnegative".into());
        }
        let sum_of = |pop: Population| -> f64 {
            Endpoint::BOTH
                .iter()
                .map(|&e| self.alphas[HypothesisId::new(pop, e).index()])
                .sum()
        };
        const SUM_TOL: f64 = 1e-9;
        match self.kind {
            DesignKind::Gsd | DesignKind::Ad => {
                let total: f64 = self.alphas.iter().sum();
                if (total - self.alpha).abs() > SUM_TOL {
                    problems.push(format!(
                        "{} alphas must sum to {}, got {total}",
                        self.kind.label(),
                        self.alpha
                    ));
                }
            }
            DesignKind::Ggsd => {
                for pop in Population::BOTH {
                    let total = sum_of(pop);
                    if (total - self.alpha).abs() > SUM_TOL {
                        problems.push(format!(
                            "gGSD alphas in {} must sum to {}, got {total}",
                            pop.label(),
                            self.alpha
                        ));
                    }
                }
                for from in HypothesisId::ALL {
                    for to in HypothesisId::ALL {
                        if from.population != to.population && self.transitions[from.index()][to.index()] != 0.0 {
                            problems.push(format!("gGSD graph has an edge {from} -> {to} across populations"));
                        }
                    }
                }
            }
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.iter().any(|g| !(0.0..=1.0).contains(g)) || row[i] != 0.0 {
                problems.push(format!(
                    "transitions out of {} must lie in [0, 1] without a self loop",
                    HypothesisId::from_index(i)
                ));
            } else if row.iter().sum::<f64>() > 1.0 + ALPHA_SLACK {
                problems.push(format!("transitions out of {} sum above one", HypothesisId::from_index(i)));
            }
        }
        if let Err(e) = self.spending.validate() {
            problems.push(e.to_string());
        }
        self.schedule.validate(&mut problems);
        for h in HypothesisId::ALL {
            let fr = &self.fractions[h.index()];
            if let Err(e) = validate_fractions(fr) {
                problems.push(format!("fractions for {h}: {e}"));
            } else if fr.len() != self.schedule.looks(h.endpoint).len() {
                problems.push(format!(
                    "fractions for {h} have {} entries but {} is tested at {} analyses",
                    fr.len(),
                    h.endpoint.label(),
                    self.schedule.looks(h.endpoint).len()
                ));
            }
        }
        if self.kind.is_adaptive() {
            match &self.futility {
                None => problems.push(format!("{} needs a futility rule", self.kind.label())),
                Some(rule) => {
                    if let Err(e) = rule.validate() {
                        problems.push(e.to_string());
                    }
                }
            }
            if let WeightSet::Fixed { table, .. } = &self.weights {
                for e in Endpoint::BOTH {
                    if let Err(err) = table.get(e, 1) {
                        problems.push(err.to_string());
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Boundaries for `h` when it holds `alpha`.
    pub fn boundaries(&self, h: HypothesisId, alpha: f64) -> Result<Arc<BoundarySet>> {
        let fractions = &self.fractions[h.index()];
        if alpha <= 0.0 {
            return Ok(Arc::new(BoundarySet::never(fractions)));
        }
        shared_cache().get(alpha, fractions, &self.spending)
    }

    /// Population selection at the end of stage 1; `None` for GSD.
    pub fn select(&self, hr_full: f64, hr_sub: f64) -> Option<SelectionDecision> {
        if !self.kind.is_adaptive() {
            return None;
        }
        self.futility.as_ref().map(|rule| select_population(hr_full, hr_sub, rule))
    }
}

/// Stage-wise event counts indexed by stage, population and endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEvents(pub [[[f64; 2]; 2]; 2]);

impl StageEvents {
    fn idx(pop: Population, e: Endpoint) -> (usize, usize) {
        (
            match pop {
                Population::Full => 0,
                Population::Sub => 1,
            },
            match e {
                Endpoint::Pfs => 0,
                Endpoint::Os => 1,
            },
        )
    }

    pub fn get(&self, stage: u8, pop: Population, e: Endpoint) -> f64 {
        let (p, q) = Self::idx(pop, e);
        self.0[usize::from(stage == 2)][p][q]
    }

    pub fn set(&mut self, stage: u8, pop: Population, e: Endpoint, n: f64) {
        let (p, q) = Self::idx(pop, e);
        self.0[usize::from(stage == 2)][p][q] = n;
    }
}

/// Everything the engine may read at one analysis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisEvidence {
    /// Pooled p-values per hypothesis, used by GSD.
    pub pooled: [Option<f64>; 4],
    /// Stage-wise p-values for the combination tests.
    pub cohorts: CohortPValues,
    /// Already-combined p-values per hypothesis; take precedence over `cohorts`.
    pub direct: [Option<f64>; 4],
    /// Already-combined intersection p-values per endpoint (PFS, OS).
    pub direct_intersection: [Option<f64>; 2],
    pub events: Option<StageEvents>,
}

impl AnalysisEvidence {
    pub fn from_snapshot(snap: &AnalysisSnapshot) -> Self {
        let mut pooled = [None; 4];
        for h in HypothesisId::ALL {
            pooled[h.index()] = Some(snap.get(Cohort::Pooled, h.population, h.endpoint).p);
        }
        let mut events = StageEvents::default();
        for (stage, cohort) in [(1u8, Cohort::Stage1), (2u8, Cohort::Stage2)] {
            for pop in Population::BOTH {
                for e in Endpoint::BOTH {
                    events.set(stage, pop, e, snap.get(cohort, pop, e).events as f64);
                }
            }
        }
        Self {
            pooled,
            cohorts: snap.cohort_pvalues(),
            direct: [None; 4],
            direct_intersection: [None; 2],
            events: Some(events),
        }
    }

    fn direct_intersection(&self, e: Endpoint) -> Option<f64> {
        let i = usize::from(e == Endpoint::Os);
        self.direct_intersection[i].or_else(|| {
            let f = self.direct[HypothesisId::new(Population::Full, e).index()]?;
            let s = self.direct[HypothesisId::new(Population::Sub, e).index()]?;
            Some(hochberg_intersection(f, s))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Futility,
    AllRejected,
    ReachedFinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminationReason,
    /// Analysis at which the trial ended; `None` for a futility stop.
    pub analysis: Option<usize>,
}

/// One test as it stood when its analysis closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub target: TestTarget,
    /// Analysis whose data produced the statistic.
    pub look: usize,
    pub z: f64,
    pub p: f64,
    pub alpha: f64,
    pub boundary: f64,
    pub nominal_p: f64,
    pub crossed: bool,
    pub confirmed: bool,
    /// F hypothesis not yet open for testing under the population gate.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub analysis: usize,
    pub tests: Vec<TestRecord>,
    /// Graph alphas after the analysis, one entry per graph.
    pub alphas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub design: DesignKind,
    pub weights: String,
    pub total_analyses: usize,
    pub selection: Option<SelectionDecision>,
    pub scenario: Option<Scenario>,
    pub analyses: Vec<AnalysisRecord>,
    /// Analysis of each confirmed rejection, indexed like [`HypothesisId::ALL`].
    pub rejected_at: [Option<usize>; 4],
    /// Analysis at which each intersection (PFS, OS) was rejected.
    pub intersection_rejected_at: [Option<usize>; 2],
    pub in_scope: [bool; 4],
    pub termination: Termination,
    pub warnings: Vec<String>,
}

impl DecisionTrace {
    pub fn rejected(&self, h: HypothesisId) -> bool {
        self.rejected_at[h.index()].is_some()
    }

    pub fn rejection_count(&self) -> usize {
        self.rejected_at.iter().filter(|r| r.is_some()).count()
    }

    /// Label of the stage at which the trial ended: futility, IA1, ..., FA.
    pub fn termination_label(&self) -> String {
        match self.termination.analysis {
            None => "futility".to_string(),
            Some(k) => analysis_label(k, self.total_analyses),
        }
    }

    /// Structural rules every trace must obey, given the overall alpha.
    /// Returns one message per broken rule.
    pub fn invariant_violations(&self, alpha: f64) -> Vec<String> {
        let mut out = Vec::new();
        let adaptive = self.design.is_adaptive();
        for h in HypothesisId::ALL {
            let Some(k) = self.rejected_at[h.index()] else { continue };
            if !self.in_scope[h.index()] {
                out.push(format!("{h} rejected while out of scope"));
            }
            if adaptive {
                match self.intersection_rejected_at[endpoint_slot(h.endpoint)] {
                    Some(r) if r <= k => {}
                    _ => out.push(format!("{h} rejected at {k} without its intersection")),
                }
            }
        }
        for rec in &self.analyses {
            for (gi, alphas) in rec.alphas.iter().enumerate() {
                let total: f64 = alphas.iter().sum();
                if total > alpha + ALPHA_SLACK {
                    out.push(format!("graph {gi} holds {total} > {alpha} after analysis {}", rec.analysis));
                }
                for h in HypothesisId::ALL {
                    let gone = self.rejected_at[h.index()].is_some_and(|r| r <= rec.analysis);
                    if gone && alphas[h.index()] != 0.0 {
                        out.push(format!("rejected {h} still holds alpha after analysis {}", rec.analysis));
                    }
                }
            }
        }
        if self.design == DesignKind::Ggsd && self.scenario == Some(Scenario::Both) {
            let first = |pop: Population| {
                HypothesisId::ALL
                    .iter()
                    .filter(|h| h.population == pop)
                    .filter_map(|h| self.rejected_at[h.index()])
                    .min()
            };
            if let Some(f) = first(Population::Full) {
                if first(Population::Sub).is_none_or(|s| s > f) {
                    out.push(format!("F rejected at {f} before any S rejection"));
                }
            }
        }
        let all_done = (0..4).all(|i| !self.in_scope[i] || self.rejected_at[i].is_some());
        let last = self.rejected_at.iter().flatten().max().copied();
        match self.termination.reason {
            TerminationReason::AllRejected if !all_done || last != self.termination.analysis => {
                out.push("terminated as all rejected, but it was not".into());
            }
            TerminationReason::ReachedFinal if all_done || self.termination.analysis != Some(self.total_analyses) => {
                out.push("reached the final analysis inconsistently".into());
            }
            _ => {}
        }
        out
    }

    /// Plain-language account of the decisions, ending with the rejections.
    pub fn narrative(&self) -> String {
        let total = self.total_analyses;
        let mut out = String::new();
        let _ = writeln!(out, "Design {} with {} weights.", self.design.label(), self.weights);
        if let Some(sel) = &self.selection {
            let _ = writeln!(
                out,
                "End of stage 1: HR(F) = {:.3}, HR(S) = {:.3}; {}.",
                sel.hr_full,
                sel.hr_sub,
                sel.selection.describe()
            );
        }
        for rec in &self.analyses {
            let label = analysis_label(rec.analysis, total);
            for t in &rec.tests {
                let what = t.target.label();
                let verdict = if t.confirmed {
                    "rejected"
                } else if t.gated {
                    "not tested yet (gate closed)"
                } else if t.alpha <= 0.0 {
                    "not tested (no alpha)"
                } else if t.crossed {
                    "crossed its boundary but not confirmed"
                } else {
                    "not rejected"
                };
                let _ = write!(out, "{label}: {what} {verdict}");
                if t.alpha > 0.0 && !t.gated {
                    let _ = write!(out, " (p = {}, boundary p = {}", fmt_p(t.p), fmt_p(t.nominal_p));
                    if t.look != rec.analysis {
                        let _ = write!(out, ", data of {}", analysis_label(t.look, total));
                    }
                    out.push(')');
                }
                out.push_str(".\n");
            }
        }
        let stop = match self.termination.reason {
            TerminationReason::Futility => "Trial stopped for futility at the end of stage 1.".to_string(),
            TerminationReason::AllRejected => format!(
                "Trial terminated at {}: every hypothesis in scope rejected.",
                self.termination_label()
            ),
            TerminationReason::ReachedFinal => "Trial continued to the final analysis.".to_string(),
        };
        let _ = writeln!(out, "{stop}");
        let mut rejections: Vec<(usize, HypothesisId)> = HypothesisId::ALL
            .into_iter()
            .filter_map(|h| self.rejected_at[h.index()].map(|k| (k, h)))
            .collect();
        rejections.sort();
        if rejections.is_empty() {
            out.push_str("No hypothesis rejected");
        } else {
            let parts: Vec<String> = rejections
                .iter()
                .map(|(k, h)| format!("{h} rejected at {}", analysis_label(*k, total)))
                .collect();
            out.push_str(&parts.join(", "));
        }
        out
    }
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.1e}")
    } else {
        format!("{p:.4}")
    }
}

struct GraphSlot {
    graph: HypothesisGraph,
    gated_on_sub: bool,
}

#[derive(Clone, Copy)]
struct Crossing {
    look: usize,
    alpha: f64,
    boundary: f64,
}

struct Run<'a> {
    design: &'a DesignSpec,
    scenario: Option<Scenario>,
    graphs: Vec<GraphSlot>,
    owner: [Option<usize>; 4],
    in_scope: [bool; 4],
    /// Combined statistics per analysis (index k - 1).
    z_elem: Vec<[Option<(f64, bool)>; 4]>,
    z_int: Vec<[Option<(f64, bool)>; 2]>,
    rejected_at: [Option<usize>; 4],
    rejection: [Option<Crossing>; 4],
    families: [ClosedFamily; 2],
    int_rejection: [Option<Crossing>; 2],
    warnings: Vec<String>,
}

fn endpoint_slot(e: Endpoint) -> usize {
    usize::from(e == Endpoint::Os)
}

fn z_of_p(p: f64) -> Result<(f64, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
    }
    let clamped = p <= 0.0 || p >= 1.0;
    Ok((-norm_quantile(p.clamp(P_CLAMP, 1.0 - P_CLAMP))?, clamped))
}

/// Runs one design on one trial's evidence. `futility_hrs` holds the
/// stage-1 (F, S) hazard ratios and is ignored by GSD.
pub fn run_design(
    design: &DesignSpec,
    futility_hrs: Option<(f64, f64)>,
    analyses: &[AnalysisEvidence],
) -> Result<DecisionTrace> {
    design.validate()?;
    let selection = if design.kind.is_adaptive() {
        let (hf, hs) = futility_hrs
            .ok_or_else(|| Error::Data("stage-1 hazard ratios are required for the futility analysis".into()))?;
        design.select(hf, hs)
    } else {
        None
    };
    run_selected(design, selection, analyses)
}

/// Like [`run_design`] but with the population selection already made.
pub fn run_selected(
    design: &DesignSpec,
    selection: Option<SelectionDecision>,
    analyses: &[AnalysisEvidence],
) -> Result<DecisionTrace> {
    let total = design.schedule.analyses;
    let scenario = selection.and_then(|s| s.selection.scenario());
    let mut trace = DecisionTrace {
        design: design.kind,
        weights: design.weights.label().to_string(),
        total_analyses: total,
        selection,
        scenario,
        analyses: Vec::new(),
        rejected_at: [None; 4],
        intersection_rejected_at: [None; 2],
        in_scope: [false; 4],
        termination: Termination {
            reason: TerminationReason::Futility,
            analysis: None,
        },
        warnings: Vec::new(),
    };
    if design.kind.is_adaptive() {
        match selection {
            None => return Err(Error::State("adaptive designs need a population selection".into())),
            Some(s) if s.selection == Selection::StopFutility => return Ok(trace),
            _ => {}
        }
    }
    let mut run = Run::new(design, scenario)?;
    for k in 1..=total {
        let evidence = analyses
            .get(k - 1)
            .ok_or_else(|| Error::Data(format!("no data supplied for {}", analysis_label(k, total))))?;
        run.load(k, evidence)?;
        run.settle(k)?;
        trace.analyses.push(run.record(k)?);
        let done = (0..4).all(|i| !run.in_scope[i] || run.rejected_at[i].is_some());
        if done || k == total {
            trace.termination = Termination {
                reason: if done {
                    TerminationReason::AllRejected
                } else {
                    TerminationReason::ReachedFinal
                },
                analysis: Some(k),
            };
            break;
        }
    }
    trace.rejected_at = run.rejected_at;
    trace.intersection_rejected_at = run.families.map(|f| f.intersection_rejected_at);
    trace.in_scope = run.in_scope;
    trace.warnings = run.warnings;
    Ok(trace)
}

impl<'a> Run<'a> {
    fn new(design: &'a DesignSpec, scenario: Option<Scenario>) -> Result<Self> {
        let alpha = design.alpha;
        let members_of = |pops: &[Population]| HypothesisId::ALL.map(|h| pops.contains(&h.population));
        let special = |pop: Population| -> Result<HypothesisGraph> {
            let mut alphas = [0.0; 4];
            let mut g = [[0.0; 4]; 4];
            let pfs = HypothesisId::new(pop, Endpoint::Pfs).index();
            let os = HypothesisId::new(pop, Endpoint::Os).index();
            alphas[pfs] = alpha;
            g[pfs][os] = 1.0;
            HypothesisGraph::with_members(alphas, g, members_of(&[pop]), alpha)
        };
        let full = || HypothesisGraph::new(design.alphas, design.transitions, alpha);
        let single = |pop: Population| HypothesisGraph::with_members(design.alphas, design.transitions, members_of(&[pop]), alpha);

        let mut graphs = Vec::new();
        match (design.kind, scenario) {
            (DesignKind::Gsd, _) => graphs.push(GraphSlot { graph: full()?, gated_on_sub: false }),
            (_, None) => return Err(Error::State("no scenario selected".into())),
            (DesignKind::Ad, Some(Scenario::Both)) => graphs.push(GraphSlot { graph: full()?, gated_on_sub: false }),
            (DesignKind::Ad, Some(sc)) => {
                let pop = sc.populations()[0];
                let graph = if design.special_graph { special(pop)? } else { full()?.restrict_to(pop) };
                graphs.push(GraphSlot { graph, gated_on_sub: false });
            }
            (DesignKind::Ggsd, Some(Scenario::Both)) => {
                graphs.push(GraphSlot { graph: single(Population::Sub)?, gated_on_sub: false });
                graphs.push(GraphSlot { graph: single(Population::Full)?, gated_on_sub: true });
            }
            (DesignKind::Ggsd, Some(sc)) => {
                let pop = sc.populations()[0];
                let graph = if design.special_graph { special(pop)? } else { single(pop)? };
                graphs.push(GraphSlot { graph, gated_on_sub: false });
            }
        }
        let mut owner = [None; 4];
        for (gi, slot) in graphs.iter().enumerate() {
            for h in HypothesisId::ALL {
                if slot.graph.is_member(h) {
                    owner[h.index()] = Some(gi);
                }
            }
        }
        let in_scope = owner.map(|o| o.is_some());
        let k = design.schedule.analyses;
        Ok(Self {
            design,
            scenario,
            graphs,
            owner,
            in_scope,
            z_elem: vec![[None; 4]; k],
            z_int: vec![[None; 2]; k],
            rejected_at: [None; 4],
            rejection: [None; 4],
            families: [ClosedFamily::new(Endpoint::Pfs), ClosedFamily::new(Endpoint::Os)],
            int_rejection: [None; 2],
            warnings: Vec::new(),
        })
    }

    fn adaptive(&self) -> bool {
        self.design.kind.is_adaptive()
    }

    fn weights_for(&self, k: usize, e: Endpoint, pop: Population, ev: &AnalysisEvidence) -> Result<StageWeights> {
        match &self.design.weights {
            WeightSet::Fixed { table, .. } => table.get(e, k),
            WeightSet::EventDriven => {
                let events = ev
                    .events
                    .ok_or_else(|| Error::Data("event counts are required for event-driven weights".into()))?;
                event_weights(events.get(1, pop, e), events.get(2, pop, e))
            }
        }
    }

    /// Computes the statistics of analysis `k`.
    fn load(&mut self, k: usize, ev: &AnalysisEvidence) -> Result<()> {
        let total = self.design.schedule.analyses;
        for e in Endpoint::BOTH {
            if !self.design.schedule.tests(e, k) {
                continue;
            }
            let Some(scenario) = self.scenario.filter(|_| self.adaptive()) else {
                for h in HypothesisId::ALL.into_iter().filter(|h| h.endpoint == e) {
                    let p = ev.pooled[h.index()].ok_or_else(|| {
                        Error::Data(format!("pooled p-value for {h} at {} is missing", analysis_label(k, total)))
                    })?;
                    self.z_elem[k - 1][h.index()] = Some(z_of_p(p)?);
                }
                continue;
            };
            let int_pop = if scenario == Scenario::SOnly { Population::Sub } else { Population::Full };
            let slot = endpoint_slot(e);
            let want_int = self.families[slot].intersection_rejected_at.is_none();
            let wanted: Vec<HypothesisId> = scenario
                .populations()
                .iter()
                .map(|&pop| HypothesisId::new(pop, e))
                .filter(|h| self.rejected_at[h.index()].is_none())
                .collect();
            let needs_wiring = (want_int && ev.direct_intersection(e).is_none())
                || wanted.iter().any(|h| ev.direct[h.index()].is_none());
            let wired = if needs_wiring {
                scenario_wiring(scenario, &ev.cohorts, e).map_err(|err| match err {
                    Error::Data(msg) => Error::Data(format!("{msg} at {}", analysis_label(k, total))),
                    other => other,
                })?
            } else {
                Vec::new()
            };
            let wired_for = |target: TestTarget| {
                wired
                    .iter()
                    .find(|t| t.target == target)
                    .copied()
                    .expect("wiring covers every selected target")
            };
            if want_int {
                let z_int = match ev.direct_intersection(e) {
                    Some(p) => z_of_p(p)?,
                    None => {
                        let t = wired_for(TestTarget::Intersection { endpoint: e });
                        let w = self.weights_for(k, e, int_pop, ev)?;
                        let c = inverse_normal(t.p1, t.p2, w)?;
                        (c.z, c.clamped)
                    }
                };
                self.z_int[k - 1][slot] = Some(z_int);
            }
            for h in wanted {
                let z = match ev.direct[h.index()] {
                    Some(p) => z_of_p(p)?,
                    None => {
                        let t = wired_for(TestTarget::elementary(h));
                        let w = self.weights_for(k, e, h.population, ev)?;
                        let c = inverse_normal(t.p1, t.p2, w)?;
                        (c.z, c.clamped)
                    }
                };
                self.z_elem[k - 1][h.index()] = Some(z);
            }
        }
        let clamped = self.z_elem[k - 1].iter().flatten().chain(self.z_int[k - 1].iter().flatten()).any(|(_, c)| *c);
        if clamped {
            self.warnings.push(format!("p-value clamped at {}", analysis_label(k, total)));
        }
        Ok(())
    }

    fn gate_open(&self, gi: usize) -> bool {
        !self.graphs[gi].gated_on_sub
            || HypothesisId::ALL
                .iter()
                .any(|h| h.population == Population::Sub && self.rejected_at[h.index()].is_some())
    }

    /// Whether `h` can be tested at analysis `k`, ignoring its alpha.
    fn testable(&self, h: HypothesisId, k: usize) -> bool {
        let i = h.index();
        self.in_scope[i]
            && self.rejected_at[i].is_none()
            && self.design.schedule.tests(h.endpoint, k)
            && self.owner[i].is_some_and(|gi| self.gate_open(gi))
    }

    fn alpha_of(&self, h: HypothesisId) -> f64 {
        self.owner[h.index()].map_or(0.0, |gi| self.graphs[gi].graph.alpha(h))
    }

    fn boundary(&self, h: HypothesisId, alpha: f64, look: usize) -> Result<f64> {
        let j = self
            .design
            .schedule
            .look_index(h.endpoint, look)
            .ok_or_else(|| Error::State(format!("{h} has no look at analysis {look}")))?;
        Ok(self.design.boundaries(h, alpha)?.z_bounds[j])
    }

    fn past_looks(&self, e: Endpoint, k: usize) -> Vec<usize> {
        self.design.schedule.looks(e).iter().copied().filter(|&l| l <= k).collect()
    }

    /// First look at which `h` crosses with its current alpha.
    fn elementary_crossing(&self, h: HypothesisId, k: usize) -> Result<Option<Crossing>> {
        let alpha = self.alpha_of(h);
        if alpha <= 0.0 {
            return Ok(None);
        }
        for l in self.past_looks(h.endpoint, k) {
            let Some((z, _)) = self.z_elem[l - 1][h.index()] else { continue };
            let c = self.boundary(h, alpha, l)?;
            if z >= c {
                return Ok(Some(Crossing { look: l, alpha, boundary: c }));
            }
        }
        Ok(None)
    }

    /// Intersection boundary at `look`: the smallest boundary among open
    /// hypotheses of the endpoint that hold alpha.
    fn intersection_boundary(&self, e: Endpoint, look: usize, k: usize) -> Result<(f64, f64)> {
        let mut best = (f64::INFINITY, 0.0);
        for h in HypothesisId::ALL.into_iter().filter(|h| h.endpoint == e) {
            if !self.testable(h, k) {
                continue;
            }
            let alpha = self.alpha_of(h);
            if alpha <= 0.0 {
                continue;
            }
            let c = self.boundary(h, alpha, look)?;
            if c < best.0 {
                best = (c, alpha);
            }
        }
        Ok(best)
    }

    fn intersection_crossing(&self, e: Endpoint, k: usize) -> Result<Option<Crossing>> {
        for l in self.past_looks(e, k) {
            let Some((z, _)) = self.z_int[l - 1][endpoint_slot(e)] else { continue };
            let (c, alpha) = self.intersection_boundary(e, l, k)?;
            if z >= c {
                return Ok(Some(Crossing { look: l, alpha, boundary: c }));
            }
        }
        Ok(None)
    }

    /// Tests, rejects and reallocates until nothing changes.
    fn settle(&mut self, k: usize) -> Result<()> {
        loop {
            let mut changed = false;
            if self.adaptive() {
                for e in Endpoint::BOTH {
                    let slot = endpoint_slot(e);
                    if self.families[slot].intersection_rejected_at.is_some() || !self.design.schedule.tests(e, k) {
                        continue;
                    }
                    if let Some(cross) = self.intersection_crossing(e, k)? {
                        self.families[slot].record_intersection(k);
                        self.int_rejection[slot] = Some(cross);
                        changed = true;
                    }
                }
            }
            for h in HypothesisId::ALL {
                if !self.testable(h, k) {
                    continue;
                }
                let Some(cross) = self.elementary_crossing(h, k)? else { continue };
                if self.adaptive() && !self.families[endpoint_slot(h.endpoint)].intersection_rejected_by(k) {
                    continue;
                }
                let gi = self.owner[h.index()].expect("testable hypotheses have a graph");
                let next = self.graphs[gi].graph.reject(h)?;
                if next.total_alpha() > next.budget() + ALPHA_SLACK {
                    return Err(Error::State(format!("alpha budget exceeded after rejecting {h}")));
                }
                self.graphs[gi].graph = next;
                self.rejected_at[h.index()] = Some(k);
                self.rejection[h.index()] = Some(cross);
                changed = true;
            }
            if !changed {
                return Ok(());
            }
        }
    }

    fn record(&self, k: usize) -> Result<AnalysisRecord> {
        let mut tests = Vec::new();
        let p_of = |z: f64| norm_sf(z);
        if self.adaptive() {
            for e in Endpoint::BOTH {
                let slot = endpoint_slot(e);
                if !self.design.schedule.tests(e, k) {
                    continue;
                }
                let rejected_at = self.families[slot].intersection_rejected_at;
                if rejected_at.is_some_and(|r| r < k) {
                    continue;
                }
                let target = TestTarget::Intersection { endpoint: e };
                let (look, alpha, boundary) = match (rejected_at, self.int_rejection[slot]) {
                    (Some(_), Some(c)) => (c.look, c.alpha, c.boundary),
                    _ => {
                        let (c, a) = self.intersection_boundary(e, k, k)?;
                        (k, a, c)
                    }
                };
                let Some((z, _)) = self.z_int[look - 1][slot] else { continue };
                tests.push(TestRecord {
                    target,
                    look,
                    z,
                    p: p_of(z),
                    alpha,
                    boundary,
                    nominal_p: p_of(boundary),
                    crossed: z >= boundary,
                    confirmed: rejected_at == Some(k),
                    gated: false,
                });
            }
        }
        for h in HypothesisId::ALL {
            let i = h.index();
            if !self.in_scope[i] || !self.design.schedule.tests(h.endpoint, k) {
                continue;
            }
            if self.rejected_at[i].is_some_and(|r| r < k) {
                continue;
            }
            let confirmed = self.rejected_at[i] == Some(k);
            let gated = !self.owner[i].is_some_and(|gi| self.gate_open(gi));
            let (look, alpha, boundary) = match self.rejection[i] {
                Some(c) if confirmed => (c.look, c.alpha, c.boundary),
                _ => {
                    let a = if gated { 0.0 } else { self.alpha_of(h) };
                    (k, a, self.boundary(h, a, k)?)
                }
            };
            let Some((z, _)) = self.z_elem[look - 1][i] else { continue };
            tests.push(TestRecord {
                target: TestTarget::elementary(h),
                look,
                z,
                p: p_of(z),
                alpha,
                boundary,
                nominal_p: p_of(boundary),
                crossed: z >= boundary,
                confirmed,
                gated,
            });
        }
        Ok(AnalysisRecord {
            analysis: k,
            tests,
            alphas: self.graphs.iter().map(|g| g.graph.alphas()).collect(),
        })
    }
}
