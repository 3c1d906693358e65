//! Alpha-spending functions and one-sided efficacy boundaries.
//!
//! Boundaries are solved look by look. Under the null the score process
//! `S(t) = Z(t) * sqrt(t)` has independent Gaussian increments, so the
//! sub-density of `S(t_k)` on the continuation region is propagated on a
//! Simpson grid and the boundary at each look is the root of
//! `P(continue to k, cross at k) = s(t_k) - s(t_{k-1})`.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{find_root, norm_pdf, norm_quantile, norm_sf, Grid, ROOT_TOL};

/// Spend increments at or below this are treated as "never cross".
const NEGLIGIBLE_SPEND: f64 = 1e-15;

/// Cumulative alpha-spending function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpendingFunction {
    /// Lan-DeMets spending approximating O'Brien-Fleming boundaries.
    #[default]
    #[serde(rename = "lan_demets_obf")]
    LanDeMetsObf,
    /// Lan-DeMets spending approximating Pocock boundaries.
    #[serde(rename = "lan_demets_pocock")]
    LanDeMetsPocock,
    /// Cumulative proportions of alpha tabulated at information fractions,
    /// linearly interpolated and zero at `t = 0`.
    Tabulated {
        fractions: Vec<f64>,
        proportions: Vec<f64>,
    },
}

impl SpendingFunction {
    pub fn validate(&self) -> Result<()> {
        if let SpendingFunction::Tabulated {
            fractions,
            proportions,
        } = self
        {
            if fractions.is_empty() || fractions.len() != proportions.len() {
                return Err(Error::Config(
                    "tabulated spending needs equally long, nonempty fraction and proportion lists"
                        .into(),
                ));
            }
            if !fractions.windows(2).all(|w| w[0] < w[1])
                || fractions[0] <= 0.0
                || (fractions[fractions.len() - 1] - 1.0).abs() > 1e-12
            {
                return Err(Error::Config(
                    "tabulated spending fractions must increase strictly in (0, 1] and end at 1"
                        .into(),
                ));
            }
            if !proportions.windows(2).all(|w| w[0] <= w[1])
                || proportions[0] < 0.0
                || (proportions[proportions.len() - 1] - 1.0).abs() > 1e-12
            {
                return Err(Error::Config(
                    "tabulated spending proportions must be nondecreasing in [0, 1] and end at 1"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    fn cache_key(&self) -> Vec<u64> {
        match self {
            SpendingFunction::LanDeMetsObf => vec![0],
            SpendingFunction::LanDeMetsPocock => vec![1],
            SpendingFunction::Tabulated {
                fractions,
                proportions,
            } => std::iter::once(2)
                .chain(fractions.iter().map(|f| f.to_bits()))
                .chain(proportions.iter().map(|p| p.to_bits()))
                .collect(),
        }
    }
}

/// Cumulative one-sided alpha spent by information fraction `t`.
pub fn spend(function: &SpendingFunction, alpha_total: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) || t > 1.0 + 1e-12 {
        return Err(Error::Domain(format!(
            "information fraction must lie in (0, 1], got {t}"
        )));
    }
    if !(alpha_total > 0.0 && alpha_total < 0.5) {
        return Err(Error::Domain(format!(
            "one-sided alpha must lie in (0, 0.5), got {alpha_total}"
        )));
    }
    if t >= 1.0 {
        return Ok(alpha_total);
    }
    let spent = match function {
        SpendingFunction::LanDeMetsObf => {
            let z = norm_quantile(1.0 - alpha_total / 2.0)?;
            2.0 * norm_sf(z / t.sqrt())
        }
        SpendingFunction::LanDeMetsPocock => {
            alpha_total * (1.0 + (std::f64::consts::E - 1.0) * t).ln()
        }
        SpendingFunction::Tabulated {
            fractions,
            proportions,
        } => {
            let i = fractions.partition_point(|&f| f < t);
            let (t0, p0) = if i == 0 {
                (0.0, 0.0)
            } else {
                (fractions[i - 1], proportions[i - 1])
            };
            let (t1, p1) = (fractions[i], proportions[i]);
            alpha_total * (p0 + (p1 - p0) * (t - t0) / (t1 - t0))
        }
    };
    Ok(spent.clamp(0.0, alpha_total))
}

/// Grid resolution of the boundary recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    /// Half-width of the integration range in null standard deviations.
    pub sd_range: f64,
    pub min_points: usize,
    /// Spacing as a fraction of the narrower of the density and kernel scales.
    pub step_fraction: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            sd_range: 8.0,
            min_points: 301,
            step_fraction: 1.0 / 12.0,
        }
    }
}

impl GridOptions {
    /// Same range with twice the node density.
    pub fn refined(self) -> Self {
        Self {
            min_points: self.min_points * 2,
            step_fraction: self.step_fraction / 2.0,
            ..self
        }
    }
}

/// Efficacy boundaries for one hypothesis over its planned looks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub fractions: Vec<f64>,
    pub z_bounds: Vec<f64>,
    pub nominal_p: Vec<f64>,
    pub alpha_total: f64,
}

impl BoundarySet {
    /// Boundaries that can never be crossed.
    pub fn never(fractions: &[f64]) -> Self {
        Self {
            fractions: fractions.to_vec(),
            z_bounds: vec![f64::INFINITY; fractions.len()],
            nominal_p: vec![0.0; fractions.len()],
            alpha_total: 0.0,
        }
    }

    /// Builds a set from externally supplied z-boundaries.
    pub fn from_z_bounds(fractions: &[f64], z_bounds: &[f64], alpha_total: f64) -> Result<Self> {
        validate_fractions(fractions)?;
        if fractions.len() != z_bounds.len() {
            return Err(Error::Domain(
                "fractions and z-boundaries differ in length".into(),
            ));
        }
        Ok(Self {
            fractions: fractions.to_vec(),
            z_bounds: z_bounds.to_vec(),
            nominal_p: z_bounds.iter().map(|&c| norm_sf(c)).collect(),
            alpha_total,
        })
    }

    pub fn looks(&self) -> usize {
        self.fractions.len()
    }
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Domain("at least one information fraction is required".into()));
    }
    if fractions[0] <= 0.0
        || fractions[fractions.len() - 1] > 1.0 + 1e-12
        || !fractions.windows(2).all(|w| w[0] < w[1])
    {
        return Err(Error::Domain(format!(
            "information fractions must increase strictly within (0, 1], got {fractions:?}"
        )));
    }
    Ok(())
}

/// Null sub-density of the score statistic on the continuation region of a look.
struct SubDensity {
    grid: Grid,
    values: Vec<f64>,
}

impl SubDensity {
    fn first(t: f64, upper_score: f64, step: f64, opts: &GridOptions) -> Result<Self> {
        let sd = t.sqrt();
        let hi = upper_score.min(opts.sd_range * sd);
        let grid = Grid::simpson(-opts.sd_range * sd, hi, opts.min_points, step)?;
        let values = grid.points().iter().map(|&s| norm_pdf(s / sd) / sd).collect();
        Ok(Self { grid, values })
    }

    /// P(S_next >= upper_score, continued so far) for a Gaussian increment of variance `dt`.
    fn cross_mass(&self, upper_score: f64, dt: f64) -> f64 {
        let sd = dt.sqrt();
        self.grid
            .points()
            .iter()
            .zip(self.grid.weights())
            .zip(&self.values)
            .map(|((&u, &w), &g)| w * g * norm_sf((upper_score - u) / sd))
            .sum()
    }

    fn propagate(&self, t: f64, dt: f64, upper_score: f64, step: f64, opts: &GridOptions) -> Result<Self> {
        let sd_total = t.sqrt();
        let hi = upper_score.min(opts.sd_range * sd_total);
        let lo = -opts.sd_range * sd_total;
        if !(hi > lo) {
            // Boundary far below any plausible path; nothing continues.
            let grid = Grid::simpson(lo, lo + step, 3, step)?;
            let len = grid.len();
            return Ok(Self {
                grid,
                values: vec![0.0; len],
            });
        }
        let grid = Grid::simpson(lo, hi, opts.min_points, step)?;
        let sd = dt.sqrt();
        let weighted: Vec<(f64, f64)> = self
            .grid
            .points()
            .iter()
            .zip(self.grid.weights())
            .zip(&self.values)
            .map(|((&u, &w), &g)| (u, w * g))
            .collect();
        let values = grid
            .points()
            .iter()
            .map(|&s| {
                weighted
                    .iter()
                    .map(|&(u, wg)| wg * norm_pdf((s - u) / sd))
                    .sum::<f64>()
                    / sd
            })
            .collect();
        Ok(Self { grid, values })
    }
}

fn grid_step(fractions: &[f64], k: usize, opts: &GridOptions) -> f64 {
    let density_scale = fractions[k].sqrt();
    let kernel_scale = if k + 1 < fractions.len() {
        (fractions[k + 1] - fractions[k]).sqrt()
    } else {
        density_scale
    };
    density_scale.min(kernel_scale) * opts.step_fraction
}

/// Solves the one-sided efficacy boundaries for the given spending plan.
pub fn compute_boundaries(
    alpha_total: f64,
    fractions: &[f64],
    function: &SpendingFunction,
) -> Result<BoundarySet> {
    compute_boundaries_with(alpha_total, fractions, function, &GridOptions::default())
}

pub fn compute_boundaries_with(
    alpha_total: f64,
    fractions: &[f64],
    function: &SpendingFunction,
    opts: &GridOptions,
) -> Result<BoundarySet> {
    validate_fractions(fractions)?;
    function.validate()?;
    if alpha_total == 0.0 {
        return Ok(BoundarySet::never(fractions));
    }
    if !(alpha_total > 0.0 && alpha_total < 0.5) {
        return Err(Error::Domain(format!(
            "one-sided alpha must lie in [0, 0.5), got {alpha_total}"
        )));
    }

    let mut cumulative = Vec::with_capacity(fractions.len());
    for &t in fractions {
        cumulative.push(spend(function, alpha_total, t)?);
    }

    let mut z_bounds = Vec::with_capacity(fractions.len());
    let mut density: Option<SubDensity> = None;
    let mut previous = 0.0;
    for (k, (&t, &cum)) in fractions.iter().zip(&cumulative).enumerate() {
        let increment = cum - previous;
        if increment < -1e-12 {
            return Err(Error::Spending(format!(
                "cumulative spend decreases at look {} ({} -> {})",
                k + 1,
                previous,
                cum
            )));
        }
        previous = cum;
        let sqrt_t = t.sqrt();
        let c = match &density {
            None => {
                if increment <= NEGLIGIBLE_SPEND {
                    f64::INFINITY
                } else {
                    -norm_quantile(increment)?
                }
            }
            Some(dens) => {
                let dt = t - fractions[k - 1];
                if increment <= NEGLIGIBLE_SPEND {
                    f64::INFINITY
                } else {
                    let f = |c: f64| dens.cross_mass(c * sqrt_t, dt) - increment;
                    find_root(f, -10.0, 40.0, ROOT_TOL)?
                }
            }
        };
        z_bounds.push(c);

        if k + 1 < fractions.len() {
            let step = grid_step(fractions, k, opts);
            let upper = c * sqrt_t;
            density = Some(match density {
                None => SubDensity::first(t, upper, step, opts)?,
                Some(dens) => dens.propagate(t, t - fractions[k - 1], upper, step, opts)?,
            });
        }
    }

    Ok(BoundarySet {
        fractions: fractions.to_vec(),
        nominal_p: z_bounds.iter().map(|&c| norm_sf(c)).collect(),
        z_bounds,
        alpha_total,
    })
}

/// Null probability of crossing at any look, by the same recursion.
pub fn crossing_probability(bounds: &BoundarySet) -> f64 {
    crossing_probability_with(bounds, &GridOptions::default())
}

pub fn crossing_probability_with(bounds: &BoundarySet, opts: &GridOptions) -> f64 {
    let fractions = &bounds.fractions;
    let mut total = 0.0;
    let mut density: Option<SubDensity> = None;
    for (k, (&t, &c)) in fractions.iter().zip(&bounds.z_bounds).enumerate() {
        let upper = c * t.sqrt();
        total += match &density {
            None => norm_sf(c),
            Some(dens) if c.is_finite() => dens.cross_mass(upper, t - fractions[k - 1]),
            Some(_) => 0.0,
        };
        if k + 1 < fractions.len() {
            let step = grid_step(fractions, k, opts);
            let next = match density {
                None => SubDensity::first(t, upper, step, opts),
                Some(dens) => dens.propagate(t, t - fractions[k - 1], upper, step, opts),
            };
            match next {
                Ok(d) => density = Some(d),
                Err(_) => return f64::NAN,
            }
        }
    }
    total
}

/// Memoised boundary sets keyed by exact alpha, fractions and spending function.
///
/// Alpha levels reachable through graph updates are few per design, so the
/// cache stays small while simulations ask for the same sets repeatedly.
#[derive(Debug, Default)]
pub struct BoundaryCache {
    map: Mutex<HashMap<Vec<u64>, Arc<BoundarySet>>>,
}

impl BoundaryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        alpha_total: f64,
        fractions: &[f64],
        function: &SpendingFunction,
    ) -> Result<Arc<BoundarySet>> {
        let key: Vec<u64> = std::iter::once(alpha_total.to_bits())
            .chain(fractions.iter().map(|f| f.to_bits()))
            .chain(function.cache_key())
            .collect();
        if let Some(found) = self.map.lock().get(&key) {
            return Ok(Arc::clone(found));
        }
        let computed = Arc::new(compute_boundaries(alpha_total, fractions, function)?);
        self.map.lock().insert(key, Arc::clone(&computed));
        Ok(computed)
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
