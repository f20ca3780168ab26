//! Seeded batches of time-reversed runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{with_pool, write_event_log, write_json, Manifest};
use crate::config::BoundarySpec;
use crate::init::replica_rng;
use crate::reversal::{sample_reversed_trajectory, EventRecord, ReversedRun, ReversedStart};
use crate::stats::{chi_square_counts, poisson_pmf, poisson_support, ks_test, tally, ChiSquare, KsTest, MIN_BIN};

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseConfig {
    pub start: ReversedStart,
    #[serde(default = "BoundarySpec::unit_interval")]
    pub boundary: BoundarySpec,
    #[serde(default = "one")]
    pub replicas: u64,
    pub master_seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Write the split log (JSONL).
    #[serde(default)]
    pub events: bool,
}

impl ReverseConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ReverseConfig = serde_json::from_str(&text).context("parsing reverse config")?;
        if cfg.replicas < 1 {
            bail!("replicas must be at least 1");
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseSummary {
    pub replicas: u64,
    pub final_counts: BTreeMap<usize, u64>,
    /// Count test against `Poisson(beta e^{2 t_end} L)`, for the Poisson start.
    pub count_test: Option<ChiSquare>,
    /// Pooled final positions against the uniform law.
    pub position_test: Option<KsTest>,
}

pub fn run_reverse(cfg: &ReverseConfig) -> Result<(Vec<ReversedRun>, ReverseSummary)> {
    let start = Instant::now();
    let runs: Vec<ReversedRun> = with_pool(|| {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|r| sample_reversed_trajectory(cfg.start, cfg.boundary, &mut replica_rng(cfg.master_seed, r)))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let final_counts = tally(runs.iter().map(|r| r.config.len()));
    let count_test = match cfg.start {
        ReversedStart::PoissonMixture { beta, t_end } => {
            let mean = beta * (2.0 * t_end).exp() * cfg.boundary.length();
            chi_square_counts(&final_counts, |k| poisson_pmf(mean, k), poisson_support(mean), MIN_BIN).ok()
        }
        ReversedStart::MuStar { .. } => None,
    };
    let (lo, len) = (cfg.boundary.lower(), cfg.boundary.length());
    let xs: Vec<f64> = runs.iter().flat_map(|r| r.config.positions().to_vec()).collect();
    let position_test = ks_test(&xs, |x| ((x - lo) / len).clamp(0.0, 1.0)).ok();
    let summary = ReverseSummary {
        replicas: cfg.replicas,
        final_counts,
        count_test,
        position_test,
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let mut files = vec!["summary.json".to_string(), "final.jsonl".to_string()];
        write_json(&dir.join("summary.json"), &summary)?;
        let finals: Vec<String> = runs
            .iter()
            .enumerate()
            .map(|(r, run)| serde_json::json!({"replica": r, "duration": run.duration, "positions": run.config.positions()}).to_string())
            .collect();
        fs::write(dir.join("final.jsonl"), finals.join("\n") + "\n")?;
        if cfg.events {
            let items = runs
                .iter()
                .enumerate()
                .flat_map(|(r, run)| run.splits.iter().map(move |s| (r as u64, EventRecord::Split(s.clone()))));
            write_event_log(&dir.join("events.jsonl"), items)?;
            files.push("events.jsonl".into());
        }
        let wall = start.elapsed().as_secs_f64();
        Manifest::new("reverse", serde_json::to_value(cfg)?, cfg.master_seed, wall, files).write(dir)?;
    }
    Ok((runs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_batch_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ReverseConfig {
            start: ReversedStart::PoissonMixture { beta: 5.0, t_end: 0.2 },
            boundary: BoundarySpec::unit_interval(),
            replicas: 20,
            master_seed: 4,
            out: Some(dir.path().to_path_buf()),
            events: true,
        };
        let (runs, summary) = run_reverse(&cfg).unwrap();
        assert_eq!(runs.len(), 20);
        assert_eq!(summary.final_counts.values().sum::<u64>(), 20);
        let log = fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
        assert!(log.lines().all(|l| l.contains(r#""kind":"split""#)));
        assert!(dir.path().join("manifest.json").exists());
        let (again, _) = run_reverse(&ReverseConfig { out: None, ..cfg }).unwrap();
        assert_eq!(runs, again);
    }
}
