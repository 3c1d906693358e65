//! Trial simulation: staged enrollment, exponential event and dropout
//! times, event-driven analysis timing, and per-cohort logrank and Cox
//! summaries.

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::combine::{CohortPValues, Scenario, Slot};
use crate::error::{Error, Result};
use crate::multiplicity::{Endpoint, HypothesisId, Population};
use crate::numerics::norm_sf;

/// Control-arm medians and experimental/control hazard ratios for one
/// patient stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumParams {
    pub median_pfs: f64,
    pub median_os: f64,
    pub hr_pfs: f64,
    pub hr_os: f64,
}

impl StratumParams {
    fn median(&self, e: Endpoint) -> f64 {
        match e {
            Endpoint::Pfs => self.median_pfs,
            Endpoint::Os => self.median_os,
        }
    }

    pub fn hr(&self, e: Endpoint) -> f64 {
        match e {
            Endpoint::Pfs => self.hr_pfs,
            Endpoint::Os => self.hr_os,
        }
    }

    /// Monthly event hazard in the given arm.
    pub fn hazard(&self, e: Endpoint, arm: Arm) -> f64 {
        let base = std::f64::consts::LN_2 / self.median(e);
        match arm {
            Arm::Control => base,
            Arm::Experimental => base * self.hr(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutRates {
    /// Yearly probability of dropping out before a PFS event.
    pub pfs_annual: f64,
    pub os_annual: f64,
}

impl DropoutRates {
    pub fn monthly_hazard(&self, e: Endpoint) -> f64 {
        let annual = match e {
            Endpoint::Pfs => self.pfs_annual,
            Endpoint::Os => self.os_annual,
        };
        -(1.0 - annual).ln() / 12.0
    }
}

/// How PFS and OS latent times relate within a patient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointCoupling {
    /// Independent exponential marginals.
    #[default]
    Independent,
    /// OS exponential and PFS = min(OS, time to progression) with the
    /// progression hazard chosen so that PFS keeps its exponential marginal.
    Nested,
}

/// End of stage 1, which is also the time of the futility analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageCutoff {
    Months(f64),
    /// Calendar time at which the full population reaches this many PFS events.
    PfsEvents(usize),
}

/// Event targets that time one analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisTrigger {
    pub endpoint: Endpoint,
    /// Target when the full population drives the schedule.
    pub full_events: usize,
    /// Target when only the subgroup continues.
    pub sub_events: usize,
}

impl AnalysisTrigger {
    pub fn target(&self, population: Population) -> usize {
        match population {
            Population::Full => self.full_events,
            Population::Sub => self.sub_events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub sample_size: usize,
    pub sub_prevalence: f64,
    /// Months of uniform accrual.
    pub enroll_duration: f64,
    pub stage1_cutoff: StageCutoff,
    pub sub: StratumParams,
    pub complement: StratumParams,
    pub dropout: DropoutRates,
    #[serde(default)]
    pub coupling: EndpointCoupling,
    pub triggers: Vec<AnalysisTrigger>,
    /// Hypotheses that are true nulls; derived from the hazard ratios when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_nulls: Option<Vec<HypothesisId>>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.sample_size == 0 {
            problems.push("sample_size must be positive".to_string());
        }
        if !(self.sub_prevalence > 0.0 && self.sub_prevalence <= 1.0) {
            problems.push(format!("sub_prevalence must lie in (0, 1], got {}", self.sub_prevalence));
        }
        if !(self.enroll_duration > 0.0) {
            problems.push("enroll_duration must be positive".to_string());
        }
        match self.stage1_cutoff {
            StageCutoff::Months(m) if !(m > 0.0) => {
                problems.push("stage1_cutoff months must be positive".to_string())
            }
            StageCutoff::PfsEvents(0) => problems.push("stage1_cutoff events must be positive".to_string()),
            _ => {}
        }
        for (name, s) in [("sub", &self.sub), ("complement", &self.complement)] {
            if !(s.median_pfs > 0.0 && s.median_os > 0.0) {
                problems.push(format!("{name} medians must be positive"));
            }
            if !(s.hr_pfs > 0.0 && s.hr_os > 0.0) {
                problems.push(format!("{name} hazard ratios must be positive"));
            }
            if self.coupling == EndpointCoupling::Nested {
                for arm in [Arm::Control, Arm::Experimental] {
                    if s.hazard(Endpoint::Pfs, arm) <= s.hazard(Endpoint::Os, arm) {
                        problems.push(format!(
                            "{name}: nested coupling needs the PFS hazard to exceed the OS hazard in every arm"
                        ));
                        break;
                    }
                }
            }
        }
        for (name, d) in [("pfs_annual", self.dropout.pfs_annual), ("os_annual", self.dropout.os_annual)] {
            if !(0.0..1.0).contains(&d) {
                problems.push(format!("dropout {name} must lie in [0, 1), got {d}"));
            }
        }
        if self.triggers.is_empty() {
            problems.push("at least one analysis trigger is required".to_string());
        }
        for e in Endpoint::BOTH {
            for pop in Population::BOTH {
                let targets: Vec<usize> = self
                    .triggers
                    .iter()
                    .filter(|t| t.endpoint == e)
                    .map(|t| t.target(pop))
                    .collect();
                if targets.windows(2).any(|w| w[0] > w[1]) || targets.contains(&0) {
                    problems.push(format!(
                        "{} triggers for {} must be positive and nondecreasing",
                        e.label(),
                        pop.label()
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn stratum(&self, in_subgroup: bool) -> &StratumParams {
        if in_subgroup {
            &self.sub
        } else {
            &self.complement
        }
    }

    /// True null hypotheses: explicit list, or else S hypotheses with a
    /// unit subgroup HR and F hypotheses with a unit complement HR.
    pub fn true_nulls(&self) -> Vec<HypothesisId> {
        if let Some(list) = &self.true_nulls {
            return list.clone();
        }
        HypothesisId::ALL
            .into_iter()
            .filter(|h| {
                let stratum = match h.population {
                    Population::Sub => &self.sub,
                    Population::Full => &self.complement,
                };
                stratum.hr(h.endpoint) == 1.0
            })
            .collect()
    }

    /// Expected events by calendar `time` under full enrollment.
    pub fn expected_events(&self, time: f64, population: Population, endpoint: Endpoint) -> f64 {
        let dropout = self.dropout.monthly_hazard(endpoint);
        let horizon = time.min(self.enroll_duration);
        if horizon <= 0.0 {
            return 0.0;
        }
        let strata: &[(bool, f64)] = match population {
            Population::Sub => &[(true, 1.0)],
            Population::Full => &[(true, 1.0), (false, 1.0)],
        };
        let mut total = 0.0;
        for &(in_sub, _) in strata {
            let share = if in_sub { self.sub_prevalence } else { 1.0 - self.sub_prevalence };
            let s = self.stratum(in_sub);
            for arm in [Arm::Control, Arm::Experimental] {
                let rate = s.hazard(endpoint, arm) + dropout;
                let frac = s.hazard(endpoint, arm) / rate;
                // Average over uniform entry u in [0, horizon] of 1 - exp(-rate (time - u)).
                let avg = horizon
                    - ((-rate * (time - horizon)).exp() - (-rate * time).exp()) / rate;
                total += 0.5 * share * frac * avg / self.enroll_duration;
            }
        }
        total * self.sample_size as f64
    }

    /// Calendar time at which expected events first reach `target`.
    pub fn expected_time_for(&self, target: f64, population: Population, endpoint: Endpoint) -> Option<f64> {
        let f = |t: f64| self.expected_events(t, population, endpoint) - target;
        let hi = self.enroll_duration + 600.0;
        if f(hi) < 0.0 {
            return None;
        }
        crate::numerics::find_root(f, 0.0, hi, 1e-9).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Experimental,
}

/// One randomised patient; all durations are months from enrollment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub enroll_time: f64,
    pub stage: u8,
    pub in_subgroup: bool,
    pub arm: Arm,
    pub pfs_time: f64,
    pub os_time: f64,
    pub pfs_dropout: f64,
    pub os_dropout: f64,
}

impl PatientRecord {
    fn latent(&self, e: Endpoint) -> (f64, f64) {
        match e {
            Endpoint::Pfs => (self.pfs_time, self.pfs_dropout),
            Endpoint::Os => (self.os_time, self.os_dropout),
        }
    }

    /// Calendar time of the event, if it is observed before dropout.
    pub fn event_calendar_time(&self, e: Endpoint) -> Option<f64> {
        let (t, drop) = self.latent(e);
        (t <= drop).then_some(self.enroll_time + t)
    }

    /// Follow-up time and event flag at calendar time `at`, or `None` if
    /// the patient is not yet enrolled.
    pub fn observe(&self, e: Endpoint, at: f64) -> Option<(f64, bool)> {
        if self.enroll_time > at {
            return None;
        }
        let (t, drop) = self.latent(e);
        let admin = at - self.enroll_time;
        let censor = drop.min(admin);
        Some(if t <= censor { (t, true) } else { (censor, false) })
    }

    pub fn in_population(&self, p: Population) -> bool {
        match p {
            Population::Full => true,
            Population::Sub => self.in_subgroup,
        }
    }
}

/// Generator for replication `rep` of a run seeded with `seed`; distinct
/// replications use distinct ChaCha streams of the same key.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn exp_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate <= 0.0 {
        // Still consume a draw so streams stay aligned across configurations.
        let _: f64 = rng.random();
        return f64::INFINITY;
    }
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Simulates every patient of the planned trial.
pub fn generate_trial(spec: &ScenarioSpec, seed: u64) -> Result<Vec<PatientRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_trial_with(spec, &mut rng)
}

pub fn generate_trial_with<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let drop_pfs = spec.dropout.monthly_hazard(Endpoint::Pfs);
    let drop_os = spec.dropout.monthly_hazard(Endpoint::Os);
    let mut records: Vec<PatientRecord> = (0..spec.sample_size)
        .map(|_| {
            let enroll_time = rng.random::<f64>() * spec.enroll_duration;
            let in_subgroup = rng.random::<f64>() < spec.sub_prevalence;
            let arm = if rng.random::<f64>() < 0.5 { Arm::Control } else { Arm::Experimental };
            let s = spec.stratum(in_subgroup);
            let pfs_rate = s.hazard(Endpoint::Pfs, arm);
            let os_rate = s.hazard(Endpoint::Os, arm);
            let (pfs_time, os_time) = match spec.coupling {
                EndpointCoupling::Independent => (exp_draw(pfs_rate, rng), exp_draw(os_rate, rng)),
                EndpointCoupling::Nested => {
                    let os = exp_draw(os_rate, rng);
                    let progression = exp_draw(pfs_rate - os_rate, rng);
                    (progression.min(os), os)
                }
            };
            PatientRecord {
                enroll_time,
                stage: 1,
                in_subgroup,
                arm,
                pfs_time,
                os_time,
                pfs_dropout: exp_draw(drop_pfs, rng),
                os_dropout: exp_draw(drop_os, rng),
            }
        })
        .collect();
    records.sort_by(|a, b| a.enroll_time.total_cmp(&b.enroll_time));
    let cutoff = stage1_cutoff_time(&records, spec)?;
    for r in &mut records {
        r.stage = if r.enroll_time < cutoff { 1 } else { 2 };
    }
    Ok(records)
}

/// Calendar time ending stage 1 for these records.
pub fn stage1_cutoff_time(records: &[PatientRecord], spec: &ScenarioSpec) -> Result<f64> {
    match spec.stage1_cutoff {
        StageCutoff::Months(m) => Ok(m),
        StageCutoff::PfsEvents(n) => event_time(records, Population::Full, Endpoint::Pfs, n),
    }
}

/// Calendar time of the `target`-th observed event in a population.
pub fn event_time(records: &[PatientRecord], population: Population, endpoint: Endpoint, target: usize) -> Result<f64> {
    let mut times: Vec<f64> = records
        .iter()
        .filter(|r| r.in_population(population))
        .filter_map(|r| r.event_calendar_time(endpoint))
        .collect();
    if target == 0 || target > times.len() {
        return Err(Error::Scheduling {
            what: format!("{} in {}", endpoint.label(), population.label()),
            target,
            achievable: times.len(),
        });
    }
    times.sort_by(f64::total_cmp);
    Ok(times[target - 1])
}

/// Patients actually enrolled once the scenario is chosen: under S only,
/// stage-2 enrollment is limited to the subgroup.
pub fn enrolled_under(records: &[PatientRecord], scenario: Scenario) -> Vec<PatientRecord> {
    match scenario {
        Scenario::SOnly => records
            .iter()
            .filter(|r| r.stage == 1 || r.in_subgroup)
            .copied()
            .collect(),
        Scenario::FOnly | Scenario::Both => records.to_vec(),
    }
}

/// Calendar times of the planned analyses, driven by `population`'s targets.
pub fn schedule_analyses(
    records: &[PatientRecord],
    triggers: &[AnalysisTrigger],
    population: Population,
) -> Result<Vec<f64>> {
    let mut times = Vec::with_capacity(triggers.len());
    let mut last = 0.0_f64;
    for trig in triggers {
        let t = event_time(records, population, trig.endpoint, trig.target(population))?;
        last = last.max(t);
        times.push(last);
    }
    Ok(times)
}

/// Like [`schedule_analyses`], but an unreachable target falls back to
/// the last event of that endpoint; each fallback adds a warning.
pub fn schedule_analyses_capped(
    records: &[PatientRecord],
    triggers: &[AnalysisTrigger],
    population: Population,
) -> Result<(Vec<f64>, Vec<String>)> {
    let mut times = Vec::with_capacity(triggers.len());
    let mut warnings = Vec::new();
    let mut last = 0.0_f64;
    for trig in triggers {
        let target = trig.target(population);
        let t = match event_time(records, population, trig.endpoint, target) {
            Ok(t) => t,
            Err(Error::Scheduling { what, target, achievable }) if achievable > 0 => {
                warnings.push(format!("{what}: only {achievable} of {target} events reachable"));
                event_time(records, population, trig.endpoint, achievable)?
            }
            Err(e) => return Err(e),
        };
        last = last.max(t);
        times.push(last);
    }
    Ok((times, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cohort {
    Stage1,
    Stage2,
    Pooled,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::Stage1, Cohort::Stage2, Cohort::Pooled];

    fn index(self) -> usize {
        match self {
            Cohort::Stage1 => 0,
            Cohort::Stage2 => 1,
            Cohort::Pooled => 2,
        }
    }

    fn admits(self, stage: u8) -> bool {
        match self {
            Cohort::Stage1 => stage == 1,
            Cohort::Stage2 => stage == 2,
            Cohort::Pooled => true,
        }
    }
}

/// Logrank summary of one cohort, population and endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogrankStats {
    pub events: usize,
    /// Positive when the experimental arm has fewer events than expected.
    pub z: f64,
    /// One-sided p-value `1 - Phi(z)`; 1 when there are no events.
    pub p: f64,
    pub no_events: bool,
}

impl LogrankStats {
    const EMPTY: LogrankStats = LogrankStats {
        events: 0,
        z: 0.0,
        p: 1.0,
        no_events: true,
    };
}

/// Follow-up observation for one patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub event: bool,
    pub experimental: bool,
}

/// Logrank statistic over observations sorted by time.
pub fn logrank<'a, I>(sorted: I) -> LogrankStats
where
    I: IntoIterator<Item = &'a Observation>,
    I::IntoIter: Clone,
{
    let iter = sorted.into_iter();
    let (mut at_risk, mut at_risk_exp) = (0usize, 0usize);
    for o in iter.clone() {
        at_risk += 1;
        at_risk_exp += o.experimental as usize;
    }
    let mut expected_minus_observed = 0.0;
    let mut variance = 0.0;
    let mut events = 0usize;
    let mut iter = iter.peekable();
    while let Some(first) = iter.next() {
        let t = first.time;
        let (mut n_here, mut n_here_exp, mut d, mut d_exp) = (1usize, first.experimental as usize, first.event as usize, (first.event && first.experimental) as usize);
        while let Some(next) = iter.peek() {
            if next.time != t {
                break;
            }
            n_here += 1;
            n_here_exp += next.experimental as usize;
            d += next.event as usize;
            d_exp += (next.event && next.experimental) as usize;
            iter.next();
        }
        if d > 0 {
            let n = at_risk as f64;
            let share = at_risk_exp as f64 / n;
            let df = d as f64;
            expected_minus_observed += df * share - d_exp as f64;
            if at_risk > 1 {
                variance += df * share * (1.0 - share) * (n - df) / (n - 1.0);
            }
            events += d;
        }
        at_risk -= n_here;
        at_risk_exp -= n_here_exp;
    }
    if events == 0 || variance <= 0.0 {
        return LogrankStats {
            events,
            ..LogrankStats::EMPTY
        };
    }
    let z = expected_minus_observed / variance.sqrt();
    LogrankStats {
        events,
        z,
        p: norm_sf(z),
        no_events: false,
    }
}

/// Cox partial-likelihood hazard ratio (experimental / control) with
/// Breslow ties, by Newton iteration from log HR = 0.
pub fn cox_hazard_ratio<'a, I>(sorted: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a Observation>,
    I::IntoIter: Clone,
{
    let obs: Vec<&Observation> = sorted.into_iter().collect();
    let n_exp = obs.iter().filter(|o| o.experimental).count();
    let has_events = |exp: bool| obs.iter().any(|o| o.event && o.experimental == exp);
    if n_exp == 0 || n_exp == obs.len() || !has_events(true) || !has_events(false) {
        return None;
    }
    let mut beta = 0.0_f64;
    for _ in 0..50 {
        let w = beta.exp();
        // Risk-set sums from the end backwards.
        let mut s0 = obs.iter().map(|o| if o.experimental { w } else { 1.0 }).sum::<f64>();
        let mut s1 = n_exp as f64 * w;
        let (mut score, mut info) = (0.0, 0.0);
        let mut i = 0;
        while i < obs.len() {
            let t = obs[i].time;
            let mut j = i;
            let (mut d, mut d_exp, mut leave0, mut leave1) = (0.0, 0.0, 0.0, 0.0);
            while j < obs.len() && obs[j].time == t {
                let o = obs[j];
                let wi = if o.experimental { w } else { 1.0 };
                leave0 += wi;
                if o.experimental {
                    leave1 += wi;
                }
                if o.event {
                    d += 1.0;
                    if o.experimental {
                        d_exp += 1.0;
                    }
                }
                j += 1;
            }
            if d > 0.0 {
                let mean = s1 / s0;
                score += d_exp - d * mean;
                info += d * mean * (1.0 - mean);
            }
            s0 -= leave0;
            s1 -= leave1;
            i = j;
        }
        if !(info > 0.0) {
            return None;
        }
        if score.abs() < 1e-8 {
            return Some(beta.exp());
        }
        let step = (score / info).clamp(-2.0, 2.0);
        beta += step;
    }
    beta.is_finite().then(|| beta.exp())
}

/// Per-cohort summaries of the data available at one calendar time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSnapshot {
    pub time: f64,
    /// Indexed by cohort, population (F, S) and endpoint (PFS, OS).
    stats: [[[LogrankStats; 2]; 2]; 3],
    /// Stage-1 PFS hazard ratios.
    pub hr_full: Option<f64>,
    pub hr_sub: Option<f64>,
}

fn pop_index(p: Population) -> usize {
    match p {
        Population::Full => 0,
        Population::Sub => 1,
    }
}

fn endpoint_index(e: Endpoint) -> usize {
    match e {
        Endpoint::Pfs => 0,
        Endpoint::Os => 1,
    }
}

impl AnalysisSnapshot {
    pub fn get(&self, cohort: Cohort, population: Population, endpoint: Endpoint) -> &LogrankStats {
        &self.stats[cohort.index()][pop_index(population)][endpoint_index(endpoint)]
    }

    /// Stage-wise p-values for the combination tests.
    pub fn cohort_pvalues(&self) -> CohortPValues {
        let mut c = CohortPValues::new();
        for (stage, cohort) in [(1u8, Cohort::Stage1), (2u8, Cohort::Stage2)] {
            for e in Endpoint::BOTH {
                for pop in Population::BOTH {
                    c.set(stage, e, Slot::from(pop), self.get(cohort, pop, e).p)
                        .expect("logrank p-values lie in [0, 1]");
                }
            }
        }
        c
    }

    /// Slots with no events, reported as warnings.
    pub fn empty_slots(&self) -> Vec<String> {
        let mut out = Vec::new();
        for cohort in Cohort::ALL {
            for pop in Population::BOTH {
                for e in Endpoint::BOTH {
                    if self.get(cohort, pop, e).no_events {
                        out.push(format!("{cohort:?} {} {}", pop.label(), e.label()));
                    }
                }
            }
        }
        out
    }
}

fn observations(records: &[PatientRecord], endpoint: Endpoint, at: f64) -> Vec<(Observation, u8, bool)> {
    let mut obs: Vec<(Observation, u8, bool)> = records
        .iter()
        .filter_map(|r| {
            r.observe(endpoint, at).map(|(time, event)| {
                (
                    Observation {
                        time,
                        event,
                        experimental: r.arm == Arm::Experimental,
                    },
                    r.stage,
                    r.in_subgroup,
                )
            })
        })
        .collect();
    obs.sort_by(|a, b| a.0.time.total_cmp(&b.0.time));
    obs
}

/// Summaries of every cohort, population and endpoint at calendar `time`.
pub fn snapshot_at(records: &[PatientRecord], time: f64) -> Result<AnalysisSnapshot> {
    if !(time >= 0.0) {
        return Err(Error::Domain(format!("snapshot time must be nonnegative, got {time}")));
    }
    let mut stats = [[[LogrankStats::EMPTY; 2]; 2]; 3];
    let mut hr = [None, None];
    for e in Endpoint::BOTH {
        let obs = observations(records, e, time);
        for cohort in Cohort::ALL {
            for pop in Population::BOTH {
                let selected: Vec<Observation> = obs
                    .iter()
                    .filter(|(_, stage, sub)| cohort.admits(*stage) && (pop == Population::Full || *sub))
                    .map(|(o, _, _)| *o)
                    .collect();
                stats[cohort.index()][pop_index(pop)][endpoint_index(e)] = logrank(&selected);
                if e == Endpoint::Pfs && cohort == Cohort::Stage1 {
                    hr[pop_index(pop)] = cox_hazard_ratio(&selected);
                }
            }
        }
    }
    Ok(AnalysisSnapshot {
        time,
        stats,
        hr_full: hr[0],
        hr_sub: hr[1],
    })
}

/// One patient per row, comma separated with a header.
pub fn write_trial_csv<W: Write>(records: &[PatientRecord], mut out: W) -> io::Result<()> {
    writeln!(
        out,
        "patient,enroll_time,stage,subgroup,arm,pfs_time,os_time,pfs_dropout,os_dropout"
    )?;
    for (i, r) in records.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            i + 1,
            r.enroll_time,
            r.stage,
            r.in_subgroup as u8,
            match r.arm {
                Arm::Control => "control",
                Arm::Experimental => "experimental",
            },
            r.pfs_time,
            r.os_time,
            r.pfs_dropout,
            r.os_dropout
        )?;
    }
    Ok(())
}
