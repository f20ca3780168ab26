//! Experiment driver: configs, replicas, outputs, canned runs and the
//! acceptance suite.

pub mod experiment;
pub mod reverse;
pub mod verify;

pub use experiment::{
    run_experiment, run_replica, Check, CountLaw, EngineChoice, ExperimentConfig, MergedReport, Outputs,
    ReplicaOutcome, RunOutput, Snapshots, Stop,
};
pub use reverse::{run_reverse, ReverseConfig, ReverseSummary};
pub use verify::{format_line, run_criterion, verify, CriterionResult, Scale, CRITERIA};

use crate::config::BoundarySpec;
use crate::init::InitialLaw;

pub const CANNED: [&str; 4] = ["binomial-thinning", "self-similarity", "poisson-invariance", "all-survive"];

/// Ready-made experiments.
pub fn canned(name: &str, master_seed: u64) -> Option<ExperimentConfig> {
    let base = |initial, boundary, stop, replicas| ExperimentConfig {
        name: name.to_string(),
        initial,
        boundary,
        stop,
        snapshots: Snapshots::default(),
        replicas,
        master_seed,
        outputs: Outputs::default(),
        checks: Check::ALL.to_vec(),
        engine: EngineChoice::Auto,
        horizon: 50.0,
    };
    let unit = BoundarySpec::unit_interval();
    Some(match name {
        "binomial-thinning" => base(InitialLaw::UniformN { n: 50 }, unit, Stop::TEnd(-0.5 * 0.67f64.ln()), 10_000),
        "self-similarity" => {
            let n = 1_000_000;
            let mut c = base(
                InitialLaw::PoissonVoronoi { n_seeds: n },
                BoundarySpec::Periodic { length: n as f64 },
                Stop::SurvivalFraction(0.01),
                1,
            );
            c.snapshots = Snapshots::Fractions(vec![1.0, 0.5, 0.1, 0.01]);
            c
        }
        "poisson-invariance" => {
            base(InitialLaw::Poisson { lambda: 200.0 }, unit, Stop::TEnd(0.5 * 2f64.ln()), 10_000)
        }
        "all-survive" => base(InitialLaw::UniformN { n: 3 }, unit, Stop::TEnd(0.25), 100_000),
        _ => return None,
    })
}
