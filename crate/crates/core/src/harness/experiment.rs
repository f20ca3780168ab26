//! Experiment configs and the seeded multi-replica runner.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BoundarySpec, Configuration};
use crate::flow::{evolve_until, CollisionEvent, FlowOptions, InvariantViolation, LocalEngine, LocalOptions, Recorder};
use crate::init::{replica_rng, InitialLaw, RNG_NAME};
use crate::markov::death_kernel;
use crate::reversal::EventRecord;
use crate::stats::{
    chi_square_counts, poisson_pmf, poisson_support, snapshot_csv_row, ChiSquare, Counters, StatsReport, MIN_BIN,
    SNAPSHOT_CSV_HEADER,
};

/// Periodic runs at least this large use the local engine under `auto`.
pub const LOCAL_ABOVE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stop {
    TEnd(f64),
    /// Fraction of the initial particle count still alive.
    SurvivalFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snapshots {
    Times(Vec<f64>),
    Fractions(Vec<f64>),
    /// `start * ratio^i` for `i < count`.
    Geometric { start: f64, ratio: f64, count: usize },
}

impl Default for Snapshots {
    fn default() -> Self {
        Snapshots::Times(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Occupation,
    GapGrowth,
    MonotoneCount,
    Length,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::Occupation, Check::GapGrowth, Check::MonotoneCount, Check::Length];

    pub fn name(self) -> &'static str {
        match self {
            Check::Occupation => "occupation",
            Check::GapGrowth => "gap_growth",
            Check::MonotoneCount => "monotone_count",
            Check::Length => "length",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    #[default]
    Auto,
    Spectral,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
    /// JSONL collision log (memory grows with the event count).
    #[serde(default)]
    pub events: bool,
    #[serde(default = "yes")]
    pub histograms: bool,
}

fn yes() -> bool {
    true
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            dir: None,
            events: false,
            histograms: true,
        }
    }
}

fn one() -> u64 {
    1
}

fn all_checks() -> Vec<Check> {
    Check::ALL.to_vec()
}

fn default_horizon() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub initial: InitialLaw,
    pub boundary: BoundarySpec,
    pub stop: Stop,
    #[serde(default)]
    pub snapshots: Snapshots,
    #[serde(default = "one")]
    pub replicas: u64,
    pub master_seed: u64,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default = "all_checks")]
    pub checks: Vec<Check>,
    #[serde(default)]
    pub engine: EngineChoice,
    /// Time cap for count-based stops.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.boundary.validate()?;
        if self.replicas < 1 {
            bail!("replicas must be at least 1");
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            bail!("horizon must be positive");
        }
        let t_end = match self.stop {
            Stop::TEnd(t) if t.is_finite() && t >= 0.0 => t,
            Stop::TEnd(t) => bail!("t_end must be nonnegative (got {t})"),
            Stop::SurvivalFraction(f) if f > 0.0 && f <= 1.0 => self.horizon,
            Stop::SurvivalFraction(f) => bail!("survival_fraction must lie in (0, 1] (got {f})"),
        };
        match &self.snapshots {
            Snapshots::Times(ts) => {
                if let Some(t) = ts.iter().find(|t| !(0.0..=t_end).contains(*t)) {
                    bail!("snapshot time {t} outside [0, {t_end}]");
                }
            }
            Snapshots::Fractions(fs) => {
                if let Some(f) = fs.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                    bail!("snapshot fraction {f} outside (0, 1]");
                }
            }
            Snapshots::Geometric { start, ratio, count } => {
                if !(*start >= 0.0 && *ratio > 0.0) {
                    bail!("geometric snapshots need start >= 0 and ratio > 0");
                }
                let last = start * ratio.powi(count.saturating_sub(1) as i32);
                if *count > 0 && (last > t_end || *start > t_end) {
                    bail!("geometric snapshots run past t_end {t_end}");
                }
            }
        }
        if matches!(self.engine, EngineChoice::Local) && !self.boundary.is_periodic() {
            bail!("the local engine needs a periodic boundary");
        }
        Ok(())
    }

    fn targets(&self) -> Vec<Target> {
        match &self.snapshots {
            Snapshots::Times(ts) => {
                let mut ts = ts.clone();
                ts.sort_by(f64::total_cmp);
                ts.into_iter().map(Target::Time).collect()
            }
            Snapshots::Geometric { start, ratio, count } => {
                (0..*count).map(|i| Target::Time(start * ratio.powi(i as i32))).collect()
            }
            Snapshots::Fractions(fs) => {
                let mut fs = fs.clone();
                fs.sort_by(|a, b| b.total_cmp(a));
                fs.into_iter().map(Target::Fraction).collect()
            }
        }
    }

    /// Count law implied by theory for the final state, when there is one:
    /// binomial thinning for uniform starts and Poisson for Poisson starts,
    /// both on fixed endpoints with a time stop.
    pub fn count_law(&self) -> Option<CountLaw> {
        let (Stop::TEnd(t), BoundarySpec::FixedEndpoints { .. }) = (self.stop, self.boundary) else {
            return None;
        };
        match self.initial {
            InitialLaw::UniformN { n } => Some(CountLaw::Binomial { n, t }),
            InitialLaw::Poisson { lambda } => Some(CountLaw::Poisson {
                mean: lambda * self.boundary.length() * (-2.0 * t).exp(),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountLaw {
    /// Survivors of `n` particles at time `t`.
    Binomial { n: usize, t: f64 },
    Poisson { mean: f64 },
}

impl CountLaw {
    pub fn test(&self, counts: &BTreeMap<usize, u64>) -> Option<ChiSquare> {
        match *self {
            CountLaw::Binomial { n, t } => {
                chi_square_counts(counts, |m| death_kernel(n, t, m).unwrap_or(0.0), 0..=n, MIN_BIN).ok()
            }
            CountLaw::Poisson { mean } => {
                chi_square_counts(counts, |k| poisson_pmf(mean, k), poisson_support(mean), MIN_BIN).ok()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Time(f64),
    Fraction(f64),
}

/// Either engine behind one interface.
enum Driver {
    Exact(Configuration),
    Local(LocalEngine),
}

impl Driver {
    fn new(x0: &Configuration, choice: EngineChoice) -> Result<Self> {
        let local = match choice {
            EngineChoice::Auto => x0.boundary().is_periodic() && x0.len() >= LOCAL_ABOVE,
            EngineChoice::Spectral => false,
            EngineChoice::Local => true,
        };
        Ok(if local {
            Driver::Local(LocalEngine::new(x0, LocalOptions::default())?)
        } else {
            Driver::Exact(x0.clone())
        })
    }

    fn advance(&mut self, t_end: f64, min_count: Option<usize>, rec: &mut Recorder) -> Result<()> {
        match self {
            Driver::Exact(c) => *c = evolve_until(c, t_end, min_count, rec, &FlowOptions::default())?,
            Driver::Local(e) => e.advance_until(t_end, min_count, rec)?,
        }
        Ok(())
    }

    fn configuration(&self) -> Configuration {
        match self {
            Driver::Exact(c) => c.clone(),
            Driver::Local(e) => e.configuration(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Driver::Exact(c) => c.len(),
            Driver::Local(e) => e.len(),
        }
    }

    fn time(&self) -> f64 {
        match self {
            Driver::Exact(c) => c.time(),
            Driver::Local(e) => e.time(),
        }
    }
}

/// What one replica produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaOutcome {
    pub replica: u64,
    pub initial_count: usize,
    pub final_count: usize,
    pub final_time: f64,
    /// One entry per snapshot target; `None` when unreached or without gaps.
    pub snapshots: Vec<Option<StatsReport>>,
    pub final_report: Option<StatsReport>,
    pub n_events: u64,
    pub occupation_ratio: f64,
    pub gap_growth_max_ratio: f64,
    pub length_drift: f64,
    /// Every recorded violation, enforced or not.
    pub violations: Vec<InvariantViolation>,
    /// First enforced invariant that failed; the replica stopped there.
    pub failure: Option<InvariantViolation>,
    #[serde(skip)]
    pub final_config: Option<Configuration>,
    #[serde(skip)]
    pub events: Vec<CollisionEvent>,
}

fn counters(rec: &Recorder) -> Counters {
    Counters {
        occupation_integral: rec.occupation.integral(),
        occupation_elapsed: rec.occupation.elapsed(),
        gap_growth_max_ratio: rec.gap_growth.max_ratio,
        events: rec.n_events,
        violations: rec.violations.len() as u64,
    }
}

fn report(config: &Configuration, rec: &Recorder, intensity: f64) -> Option<StatsReport> {
    let mut r = StatsReport::from_configuration(config).ok()?;
    r.counters = counters(rec);
    r.mean_gap_ratio = Some(r.rescale_factor * intensity * (-2.0 * config.time()).exp());
    Some(r)
}

/// Runs replica `replica` of `cfg`. Errors are configuration or engine
/// failures; invariant violations end the replica and land in `failure`.
pub fn run_replica(cfg: &ExperimentConfig, replica: u64) -> Result<ReplicaOutcome> {
    let mut rng = replica_rng(cfg.master_seed, replica);
    let x0 = cfg.initial.sample(cfg.boundary, &mut rng)?;
    let b = x0.boundary();
    let n0 = x0.len();
    let intensity = cfg.initial.nominal_count(b) / b.length();
    let mut rec = if cfg.outputs.events {
        Recorder::new(b)
    } else {
        Recorder::counting(b)
    };
    let mut driver = Driver::new(&x0, cfg.engine)?;
    let (t_final, m_final) = match cfg.stop {
        Stop::TEnd(t) => (t, None),
        Stop::SurvivalFraction(f) => (cfg.horizon, Some((f * n0 as f64).floor() as usize)),
    };
    let done = |d: &Driver| d.time() >= t_final || m_final.is_some_and(|m| d.len() <= m);
    let enforced = |rec: &Recorder| {
        rec.violations
            .iter()
            .find(|v| cfg.checks.iter().any(|c| c.name() == v.check))
            .cloned()
    };

    let targets = cfg.targets();
    let mut snapshots = vec![None; targets.len()];
    let mut failure = None;
    for (k, target) in targets.iter().enumerate() {
        let (t, m) = match *target {
            Target::Time(t) => (t.min(t_final), m_final),
            Target::Fraction(f) => {
                let m = (f * n0 as f64).floor() as usize;
                (t_final, Some(m_final.map_or(m, |mf| m.max(mf))))
            }
        };
        let reached = match *target {
            Target::Time(t) => driver.time() >= t,
            Target::Fraction(_) => m.is_some_and(|m| driver.len() <= m),
        };
        if !reached {
            if done(&driver) {
                break;
            }
            driver.advance(t, m, &mut rec)?;
        }
        failure = enforced(&rec);
        if failure.is_some() {
            break;
        }
        let hit = match *target {
            Target::Time(t) => driver.time() >= t,
            Target::Fraction(_) => m.is_some_and(|m| driver.len() <= m),
        };
        if hit {
            snapshots[k] = report(&driver.configuration(), &rec, intensity);
        }
    }
    if failure.is_none() && !done(&driver) {
        driver.advance(t_final, m_final, &mut rec)?;
        failure = enforced(&rec);
    }
    let last = driver.configuration();
    Ok(ReplicaOutcome {
        replica,
        initial_count: n0,
        final_count: last.len(),
        final_time: last.time(),
        snapshots,
        final_report: report(&last, &rec, intensity),
        n_events: rec.n_events,
        occupation_ratio: rec.occupation.ratio(),
        gap_growth_max_ratio: rec.gap_growth.max_ratio,
        length_drift: rec.length_drift,
        violations: rec.violations.clone(),
        failure,
        final_config: Some(last),
        events: std::mem::take(&mut rec.events),
    })
}

/// Cross-replica aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub name: String,
    pub replicas: u64,
    pub failed_replicas: u64,
    pub snapshots: Vec<Option<StatsReport>>,
    pub final_report: Option<StatsReport>,
    pub final_counts: BTreeMap<usize, u64>,
    pub count_law: Option<CountLaw>,
    pub count_test: Option<ChiSquare>,
    pub max_occupation_ratio: f64,
    pub max_gap_growth_ratio: f64,
    pub max_length_drift: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub replicas: Vec<ReplicaOutcome>,
    pub merged: MergedReport,
    pub wall_seconds: f64,
}

/// Thread count from `COARSE1D_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var("COARSE1D_THREADS").ok()?.parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a pool honoring `COARSE1D_THREADS`.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

fn merge_reports<'a>(items: impl Iterator<Item = &'a StatsReport>) -> Option<StatsReport> {
    let mut acc: Option<StatsReport> = None;
    for r in items {
        match &mut acc {
            Some(a) => a.merge(r),
            None => acc = Some(r.clone()),
        }
    }
    acc
}

pub fn merge_outcomes(cfg: &ExperimentConfig, outcomes: &[ReplicaOutcome]) -> MergedReport {
    let n_snap = outcomes.first().map_or(0, |o| o.snapshots.len());
    let snapshots = (0..n_snap)
        .map(|k| merge_reports(outcomes.iter().filter_map(|o| o.snapshots[k].as_ref())))
        .collect();
    let final_report = merge_reports(outcomes.iter().filter_map(|o| o.final_report.as_ref()));
    let mut final_counts = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.failure.is_none()) {
        *final_counts.entry(o.final_count).or_insert(0) += 1;
    }
    let count_law = cfg.count_law();
    let count_test = count_law.and_then(|l| l.test(&final_counts));
    let fmax = |f: fn(&ReplicaOutcome) -> f64| outcomes.iter().map(f).fold(0.0, f64::max);
    MergedReport {
        name: cfg.name.clone(),
        replicas: outcomes.len() as u64,
        failed_replicas: outcomes.iter().filter(|o| o.failure.is_some()).count() as u64,
        snapshots,
        final_report,
        final_counts,
        count_law,
        count_test,
        max_occupation_ratio: fmax(|o| o.occupation_ratio),
        max_gap_growth_ratio: fmax(|o| o.gap_growth_max_ratio),
        max_length_drift: fmax(|o| o.length_drift),
    }
}

/// Runs all replicas (concurrently), merges, and writes the outputs when
/// `outputs.dir` is set. Results do not depend on scheduling order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes: Vec<ReplicaOutcome> =
        with_pool(|| (0..cfg.replicas).into_par_iter().map(|r| run_replica(cfg, r)).collect::<Result<Vec<_>>>())??;
    let merged = merge_outcomes(cfg, &outcomes);
    let out = RunOutput {
        replicas: outcomes,
        merged,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &cfg.outputs.dir {
        write_outputs(cfg, &out, dir)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub rng: String,
    pub crate_version: String,
    pub threads: usize,
    pub wall_seconds: f64,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, master_seed: u64, wall_seconds: f64, files: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            config,
            master_seed,
            rng: RNG_NAME.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: thread_cap().unwrap_or_else(rayon::current_num_threads),
            wall_seconds,
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// A JSONL line tagged with its replica.
#[derive(Serialize)]
struct LogLine<'a> {
    replica: u64,
    #[serde(flatten)]
    record: &'a EventRecord,
}

pub fn write_event_log<'a>(path: &Path, items: impl Iterator<Item = (u64, EventRecord)> + 'a) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for (replica, record) in items {
        serde_json::to_writer(&mut w, &LogLine { replica, record: &record })?;
        writeln!(w)?;
    }
    Ok(())
}

fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = vec!["report.json".to_string(), "snapshots.csv".to_string(), "replicas.csv".to_string()];
    write_json(&dir.join("report.json"), &ReportFile { merged: &out.merged, replicas: &out.replicas })?;

    let mut w = BufWriter::new(File::create(dir.join("snapshots.csv"))?);
    writeln!(w, "{SNAPSHOT_CSV_HEADER}")?;
    for r in out.merged.snapshots.iter().flatten() {
        writeln!(w, "{}", snapshot_csv_row(r))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("replicas.csv"))?);
    writeln!(w, "replica,{SNAPSHOT_CSV_HEADER}")?;
    for o in &out.replicas {
        for r in o.snapshots.iter().chain([&o.final_report]).flatten() {
            writeln!(w, "{},{}", o.replica, snapshot_csv_row(r))?;
        }
    }
    w.flush()?;

    if cfg.outputs.histograms {
        for (k, r) in out.merged.snapshots.iter().enumerate() {
            if let Some(r) = r {
                let name = format!("histogram_{k}.csv");
                r.histogram.write_csv(BufWriter::new(File::create(dir.join(&name))?))?;
                files.push(name);
            }
        }
        if let Some(r) = &out.merged.final_report {
            r.histogram.write_csv(BufWriter::new(File::create(dir.join("histogram_final.csv"))?))?;
            files.push("histogram_final.csv".into());
        }
    }
    if cfg.outputs.events {
        let items = out
            .replicas
            .iter()
            .flat_map(|o| o.events.iter().map(move |e| (o.replica, EventRecord::Collision(e.clone()))));
        write_event_log(&dir.join("events.jsonl"), items)?;
        files.push("events.jsonl".into());
    }
    Manifest::new("simulate", serde_json::to_value(cfg)?, cfg.master_seed, out.wall_seconds, files).write(dir)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    merged: &'a MergedReport,
    replicas: &'a [ReplicaOutcome],
}
