//! Graphical alpha reallocation, Hochberg intersection p-values and the
//! closed-testing gate between the full population and the subgroup.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking that a graph never holds more than its budget.
pub const ALPHA_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Population {
    #[serde(rename = "F")]
    Full,
    #[serde(rename = "S")]
    Sub,
}

impl Population {
    pub const BOTH: [Population; 2] = [Population::Full, Population::Sub];

    pub fn label(self) -> &'static str {
        match self {
            Population::Full => "F",
            Population::Sub => "S",
        }
    }

    pub fn other(self) -> Population {
        match self {
            Population::Full => Population::Sub,
            Population::Sub => Population::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    #[serde(rename = "PFS")]
    Pfs,
    #[serde(rename = "OS")]
    Os,
}

impl Endpoint {
    pub const BOTH: [Endpoint; 2] = [Endpoint::Pfs, Endpoint::Os];

    pub fn label(self) -> &'static str {
        match self {
            Endpoint::Pfs => "PFS",
            Endpoint::Os => "OS",
        }
    }

    pub fn other(self) -> Endpoint {
        match self {
            Endpoint::Pfs => Endpoint::Os,
            Endpoint::Os => Endpoint::Pfs,
        }
    }
}

/// One of the four elementary null hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HypothesisId {
    pub population: Population,
    pub endpoint: Endpoint,
}

impl HypothesisId {
    /// Ordered as the initial alpha slots: F-OS, F-PFS, S-OS, S-PFS.
    pub const ALL: [HypothesisId; 4] = [
        HypothesisId::new(Population::Full, Endpoint::Os),
        HypothesisId::new(Population::Full, Endpoint::Pfs),
        HypothesisId::new(Population::Sub, Endpoint::Os),
        HypothesisId::new(Population::Sub, Endpoint::Pfs),
    ];

    pub const fn new(population: Population, endpoint: Endpoint) -> Self {
        Self {
            population,
            endpoint,
        }
    }

    pub fn index(self) -> usize {
        match (self.population, self.endpoint) {
            (Population::Full, Endpoint::Os) => 0,
            (Population::Full, Endpoint::Pfs) => 1,
            (Population::Sub, Endpoint::Os) => 2,
            (Population::Sub, Endpoint::Pfs) => 3,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn label(self) -> String {
        format!("{}({})", self.endpoint.label(), self.population.label())
    }
}

impl fmt::Display for HypothesisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Within-population edges PFS -> OS and OS -> PFS, each with weight one.
pub fn within_population_transitions() -> [[f64; 4]; 4] {
    let mut g = [[0.0; 4]; 4];
    for pop in Population::BOTH {
        let os = HypothesisId::new(pop, Endpoint::Os).index();
        let pfs = HypothesisId::new(pop, Endpoint::Pfs).index();
        g[os][pfs] = 1.0;
        g[pfs][os] = 1.0;
    }
    g
}

/// Weighted graph over (a subset of) the four hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGraph {
    alphas: [f64; 4],
    transitions: [[f64; 4]; 4],
    members: [bool; 4],
    rejected: [bool; 4],
    budget: f64,
}

impl HypothesisGraph {
    /// Graph over all four hypotheses.
    pub fn new(alphas: [f64; 4], transitions: [[f64; 4]; 4], budget: f64) -> Result<Self> {
        Self::with_members(alphas, transitions, [true; 4], budget)
    }

    /// Graph restricted to the hypotheses flagged in `members`; the others
    /// carry no alpha and no edges.
    pub fn with_members(
        alphas: [f64; 4],
        transitions: [[f64; 4]; 4],
        members: [bool; 4],
        budget: f64,
    ) -> Result<Self> {
        let mut alphas = alphas;
        let mut transitions = transitions;
        for i in 0..4 {
            if !members[i] {
                alphas[i] = 0.0;
                transitions[i] = [0.0; 4];
                for row in transitions.iter_mut() {
                    row[i] = 0.0;
                }
            }
        }
        let graph = Self {
            alphas,
            transitions,
            members,
            rejected: [false; 4],
            budget,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget < 0.5) {
            return Err(Error::Config(format!(
                "graph budget must lie in (0, 0.5), got {}",
                self.budget
            )));
        }
        for (i, &a) in self.alphas.iter().enumerate() {
            if !(a >= 0.0) {
                return Err(Error::Config(format!(
                    "alpha for {} must be nonnegative, got {a}",
                    HypothesisId::from_index(i)
                )));
            }
        }
        if self.total_alpha() > self.budget + ALPHA_SLACK {
            return Err(Error::Config(format!(
                "graph alphas sum to {} which exceeds the budget {}",
                self.total_alpha(),
                self.budget
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.iter().any(|&g| !(0.0..=1.0).contains(&g)) || row[i] != 0.0 {
                return Err(Error::Config(format!(
                    "transition weights out of {} must lie in [0, 1] with no self loop",
                    HypothesisId::from_index(i)
                )));
            }
            if row.iter().sum::<f64>() > 1.0 + ALPHA_SLACK {
                return Err(Error::Config(format!(
                    "transition weights out of {} sum above one",
                    HypothesisId::from_index(i)
                )));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, h: HypothesisId) -> f64 {
        self.alphas[h.index()]
    }

    pub fn alphas(&self) -> [f64; 4] {
        self.alphas
    }

    pub fn transition(&self, from: HypothesisId, to: HypothesisId) -> f64 {
        self.transitions[from.index()][to.index()]
    }

    pub fn is_member(&self, h: HypothesisId) -> bool {
        self.members[h.index()]
    }

    pub fn is_rejected(&self, h: HypothesisId) -> bool {
        self.rejected[h.index()]
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    /// Alpha currently held by non-rejected members.
    pub fn total_alpha(&self) -> f64 {
        (0..4)
            .filter(|&i| self.members[i] && !self.rejected[i])
            .map(|i| self.alphas[i])
            .sum()
    }

    /// Rejects `h`, passes its alpha along the outgoing edges and rewires
    /// the remaining edges.
    pub fn reject(&self, h: HypothesisId) -> Result<Self> {
        let j = h.index();
        if !self.members[j] {
            return Err(Error::State(format!("{h} is not part of this graph")));
        }
        if self.rejected[j] {
            return Err(Error::State(format!("{h} is already rejected")));
        }
        let mut next = self.clone();
        let active: Vec<usize> = (0..4)
            .filter(|&i| i != j && self.members[i] && !self.rejected[i])
            .collect();
        let g = &self.transitions;
        for &l in &active {
            next.alphas[l] = self.alphas[l] + self.alphas[j] * g[j][l];
        }
        for &l in &active {
            for &k in &active {
                if l == k {
                    continue;
                }
                let denom = 1.0 - g[l][j] * g[j][l];
                next.transitions[l][k] = if denom > 0.0 {
                    (g[l][k] + g[l][j] * g[j][k]) / denom
                } else {
                    0.0
                };
            }
        }
        for i in 0..4 {
            next.transitions[i][j] = 0.0;
            next.transitions[j][i] = 0.0;
        }
        next.alphas[j] = 0.0;
        next.rejected[j] = true;
        Ok(next)
    }

    /// Drops the other population from the graph, moving each dropped
    /// hypothesis' alpha to the kept hypothesis with the same endpoint.
    pub fn restrict_to(&self, keep: Population) -> Self {
        let mut next = self.clone();
        for endpoint in Endpoint::BOTH {
            let dropped = HypothesisId::new(keep.other(), endpoint).index();
            let kept = HypothesisId::new(keep, endpoint).index();
            if next.members[dropped] && !next.rejected[dropped] && next.members[kept] {
                next.alphas[kept] += next.alphas[dropped];
            }
            next.alphas[dropped] = 0.0;
            next.members[dropped] = false;
        }
        for i in 0..4 {
            if !next.members[i] {
                next.transitions[i] = [0.0; 4];
                for row in next.transitions.iter_mut() {
                    row[i] = 0.0;
                }
            }
        }
        next
    }
}

/// Equal-weight Hochberg p-value of the intersection of two hypotheses.
pub fn hochberg_intersection(p_full: f64, p_sub: f64) -> f64 {
    let lo = p_full.min(p_sub);
    let hi = p_full.max(p_sub);
    (2.0 * lo).min(hi).clamp(0.0, 1.0)
}

/// Boundary used for an intersection test: the smallest of the elementary
/// z-boundaries that currently carry alpha.
pub fn intersection_boundary(z_bounds: &[f64]) -> Result<f64> {
    z_bounds
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Domain("intersection boundary of an empty set".into()))
}

/// Closed-testing state for one endpoint: the F and S elementary
/// hypotheses and their intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedFamily {
    pub endpoint: Endpoint,
    /// Analysis (1-based) at which the intersection was first rejected.
    pub intersection_rejected_at: Option<usize>,
}

impl ClosedFamily {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            intersection_rejected_at: None,
        }
    }

    pub fn record_intersection(&mut self, analysis: usize) {
        if self.intersection_rejected_at.is_none() {
            self.intersection_rejected_at = Some(analysis);
        }
    }

    pub fn intersection_rejected_by(&self, analysis: usize) -> bool {
        self.intersection_rejected_at.is_some_and(|k| k <= analysis)
    }
}

/// Elementary hypotheses whose rejection the closure permits.
pub fn closed_test_gate(
    intersection_rejected: bool,
    elementary_crossed: &[(Population, bool)],
) -> Vec<Population> {
    if !intersection_rejected {
        return Vec::new();
    }
    elementary_crossed
        .iter()
        .filter(|(_, crossed)| *crossed)
        .map(|(pop, _)| *pop)
        .collect()
}
