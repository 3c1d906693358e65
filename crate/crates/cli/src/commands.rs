//! Subcommand implementations. Each writes its artifacts through an
//! [`OutputSet`] and returns a short text summary for the terminal.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ggsd::boundaries::compute_boundaries;
use ggsd::engine::{analysis_label, run_design, DecisionTrace, DesignKind, DesignSpec};
use ggsd::futility::calibrate_threshold;
use ggsd::harness::{read_tables, replication_trial, run_monte_carlo, summarize, SimulationReport, Tables};
use ggsd::multiplicity::HypothesisId;
use ggsd::simdata::write_trial_csv;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::OutputSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Boundaries,
    Thresholds,
    Simulate,
    Analyze,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Boundaries => "boundaries",
            Command::Thresholds => "thresholds",
            Command::Simulate => "simulate",
            Command::Analyze => "analyze",
            Command::Report => "report",
        }
    }
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config_path: Option<PathBuf>,
    /// Patient-level data for this many leading replications.
    pub dump_trials: Option<u64>,
}

pub fn dispatch(command: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<Outcome, CliError> {
    let mut out = OutputSet::new(&cfg.out);
    let mut files = Vec::new();
    let summary = match command {
        Command::Boundaries => boundaries(cfg, &mut out, &mut files)?,
        Command::Thresholds => thresholds(cfg, &mut out, &mut files)?,
        Command::Simulate => simulate(cfg, opts, &mut out, &mut files)?,
        Command::Analyze => analyze(cfg, &mut out, &mut files)?,
        Command::Report => report(cfg, &mut out, &mut files)?,
    };
    let reps = (command == Command::Simulate).then_some(cfg.reps);
    files.push(out.finish(
        command.name(),
        opts.config_path.as_deref(),
        &cfg.text,
        cfg.seed,
        reps,
        cfg.threads,
    )?);
    Ok(Outcome { files, summary })
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| ggsd::Error::Data(format!("csv write failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Engine(ggsd::Error::Data(format!("csv write failed: {e}"))))
}

fn unique_kinds(designs: &[DesignSpec]) -> Vec<&DesignSpec> {
    let mut seen = BTreeSet::new();
    designs.iter().filter(|d| seen.insert(d.kind)).collect()
}

#[derive(Debug, Serialize)]
struct BoundaryRow {
    design: DesignKind,
    hypothesis: String,
    budget: &'static str,
    alpha: f64,
    look: usize,
    analysis: String,
    fraction: f64,
    z_bound: f64,
    nominal_p: f64,
}

fn boundaries(cfg: &RunConfig, out: &mut OutputSet, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    if cfg.designs.is_empty() {
        return Err(CliError::Usage("boundaries needs a [design] section".into()));
    }
    let mut rows = Vec::new();
    for d in unique_kinds(&cfg.designs) {
        for h in HypothesisId::ALL {
            for (budget, alpha) in [("initial", d.alphas[h.index()]), ("full", d.alpha)] {
                if alpha <= 0.0 {
                    continue;
                }
                let b = compute_boundaries(alpha, &d.fractions[h.index()], &d.spending)?;
                let looks = d.schedule.looks(h.endpoint);
                for (j, &k) in looks.iter().enumerate() {
                    rows.push(BoundaryRow {
                        design: d.kind,
                        hypothesis: h.label(),
                        budget,
                        alpha,
                        look: j + 1,
                        analysis: analysis_label(k, d.schedule.analyses),
                        fraction: b.fractions[j],
                        z_bound: b.z_bounds[j],
                        nominal_p: b.nominal_p[j],
                    });
                }
            }
        }
    }
    files.push(out.write("boundaries.csv", &to_csv(&rows)?)?);
    let mut text = String::from("design hypothesis analysis nominal_p (initial alpha)\n");
    for r in rows.iter().filter(|r| r.budget == "initial") {
        text.push_str(&format!(
            "{:5} {:8} {:4} {:.4}\n",
            r.design.label(),
            r.hypothesis,
            r.analysis,
            r.nominal_p
        ));
    }
    Ok(text)
}

#[derive(Debug, Serialize)]
struct ThresholdRow {
    population: &'static str,
    theta: f64,
    gamma: Option<f64>,
    assumed_hr: Option<f64>,
    events: Option<f64>,
    implied_theta: Option<f64>,
}

fn thresholds(cfg: &RunConfig, out: &mut OutputSet, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let rule = cfg
        .futility
        .as_ref()
        .ok_or_else(|| CliError::Usage("thresholds needs a [futility] section".into()))?;
    let mut rows = Vec::new();
    for (population, theta, cal) in [
        ("F", rule.theta_full, rule.calibration_full),
        ("S", rule.theta_sub, rule.calibration_sub),
    ] {
        let implied = cal
            .map(|c| calibrate_threshold(c.assumed_hr, c.events, c.gamma))
            .transpose()?;
        rows.push(ThresholdRow {
            population,
            theta,
            gamma: cal.map(|c| c.gamma),
            assumed_hr: cal.map(|c| c.assumed_hr),
            events: cal.map(|c| c.events),
            implied_theta: implied,
        });
    }
    files.push(out.write("thresholds.csv", &to_csv(&rows)?)?);
    Ok(rows
        .iter()
        .map(|r| match r.events {
            Some(n) => format!("theta_{} = {:.3} ({} stage-1 PFS events)\n", r.population, r.theta, n),
            None => format!("theta_{} = {:.3}\n", r.population, r.theta),
        })
        .collect())
}

fn write_tables(tables: &Tables, out: &mut OutputSet, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    files.push(out.write("fwer.csv", tables.fwer.as_bytes())?);
    files.push(out.write("power.csv", tables.power.as_bytes())?);
    files.push(out.write("termination.csv", tables.termination.as_bytes())?);
    Ok(())
}

fn report_summary(report: &SimulationReport) -> String {
    let mut text = String::from("setting      design weights  fwer    power_S power_SF reach_FA\n");
    for r in &report.rows {
        let fwer = r.fwer().map_or("-".to_string(), |f| format!("{f:.4}"));
        let fa = r.termination.last().map_or(0.0, |(_, c)| *c as f64 / r.reps as f64);
        text.push_str(&format!(
            "{:12} {:6} {:8} {:7} {:.4}  {:.4}   {:.4}\n",
            r.setting,
            r.design.label(),
            r.weights,
            fwer,
            r.power_s(),
            r.power_sf(),
            fa
        ));
    }
    text
}

fn simulate(
    cfg: &RunConfig,
    opts: &RunOptions,
    out: &mut OutputSet,
    files: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    let spec = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate needs a [scenario] section".into()))?;
    if cfg.designs.is_empty() {
        return Err(CliError::Usage("simulate needs a [design] section".into()));
    }
    let report = run_monte_carlo(spec, &cfg.designs, cfg.reps, cfg.seed, &cfg.options)?;
    write_tables(&summarize(std::slice::from_ref(&report))?, out, files)?;
    if let Some(n) = opts.dump_trials {
        for rep in 0..n.min(cfg.reps) {
            let records = replication_trial(spec, cfg.seed, rep)?;
            let mut buf = Vec::new();
            write_trial_csv(&records, &mut buf).map_err(|source| CliError::Io {
                path: out.dir().join("trials"),
                source,
            })?;
            files.push(out.write(&format!("trials/rep-{rep:06}.csv"), &buf)?);
        }
    }
    Ok(report_summary(&report))
}

/// Runs every configured design on the observed inputs.
pub fn analyze_traces(cfg: &RunConfig) -> Result<Vec<DecisionTrace>, CliError> {
    let obs = cfg
        .observed
        .as_ref()
        .ok_or_else(|| CliError::Usage("analyze needs an [observed] section".into()))?;
    if cfg.designs.is_empty() {
        return Err(CliError::Usage("analyze needs a [design] section".into()));
    }
    cfg.designs
        .iter()
        .map(|d| run_design(d, Some((obs.hr_full, obs.hr_sub)), &obs.evidence).map_err(CliError::from))
        .collect()
}

fn analyze(cfg: &RunConfig, out: &mut OutputSet, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let traces = analyze_traces(cfg)?;
    let json = serde_json::to_string_pretty(&traces).expect("traces serialize");
    files.push(out.write("traces.json", json.as_bytes())?);
    let narrative = traces
        .iter()
        .map(|t| t.narrative())
        .collect::<Vec<_>>()
        .join("\n\n");
    files.push(out.write("narrative.txt", format!("{narrative}\n").as_bytes())?);
    Ok(format!("{narrative}\n"))
}

fn read_dir_tables(dir: &Path) -> Result<Tables, CliError> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|source| CliError::Io { path, source })
    };
    Ok(Tables {
        fwer: read("fwer.csv")?,
        power: read("power.csv")?,
        termination: read("termination.csv")?,
    })
}

/// Summaries stored in a `simulate` output directory.
pub fn load_report(dir: &Path) -> Result<SimulationReport, CliError> {
    Ok(SimulationReport {
        rows: read_tables(&read_dir_tables(dir)?)?,
    })
}

fn report(cfg: &RunConfig, out: &mut OutputSet, files: &mut Vec<PathBuf>) -> Result<String, CliError> {
    if cfg.report_inputs.is_empty() {
        return Err(CliError::Usage("report needs [report] inputs".into()));
    }
    let reports = cfg
        .report_inputs
        .iter()
        .map(|d| load_report(d))
        .collect::<Result<Vec<_>, _>>()?;
    write_tables(&summarize(&reports)?, out, files)?;
    let merged = SimulationReport {
        rows: reports.into_iter().flat_map(|r| r.rows).collect(),
    };
    Ok(report_summary(&merged))
}
