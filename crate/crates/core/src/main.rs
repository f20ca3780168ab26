use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use coarse1d::harness::{self, ExperimentConfig, ReverseConfig, Scale};
use coarse1d::init::replica_rng;
use coarse1d::markov::{sample_birth_chain, sample_death_chain, BirthChainSpec};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "coarse1d", version, about = "Coalescing coarsening dynamics in one dimension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config or a canned name.
    Simulate {
        #[arg(long, conflicts_with = "canned", required_unless_present = "canned")]
        config: Option<PathBuf>,
        /// One of binomial-thinning, self-similarity, poisson-invariance, all-survive.
        #[arg(long)]
        canned: Option<String>,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides outputs.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicas: Option<u64>,
    },
    /// Sample time-reversed runs.
    Reverse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite; exits nonzero on any failure.
    Verify {
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 20240601)]
        seed: u64,
        /// Comma-separated criterion numbers.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        /// Write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the reference jump chains as JSONL trajectories.
    Chains {
        #[arg(long, value_enum)]
        variant: Variant,
        /// Initial state of the death chain.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Target state of R1.
        #[arg(long, default_value_t = 10)]
        target: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Time horizon (death chain and R2); the death chain runs to
        /// extinction when omitted.
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value_t = 1)]
        replicas: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Death,
    R1,
    R2,
}

fn simulate(
    config: Option<PathBuf>,
    canned: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    replicas: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = match (config, canned) {
        (Some(path), _) => ExperimentConfig::load(&path)?,
        (None, Some(name)) => harness::canned(&name, 0)
            .with_context(|| format!("unknown canned experiment {name:?}; try {}", harness::CANNED.join(", ")))?,
        (None, None) => bail!("need --config or --canned"),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(d) = out {
        cfg.outputs.dir = Some(d);
    }
    if let Some(r) = replicas {
        cfg.replicas = r;
    }
    let run = harness::run_experiment(&cfg)?;
    let m = &run.merged;
    say!("replicas {} (failed {}), {:.1}s", m.replicas, m.failed_replicas, run.wall_seconds);
    for (k, s) in m.snapshots.iter().enumerate() {
        if let Some(s) = s {
            say!(
                "snapshot {k}: t = {:.4}, cells {}, ks {:.4}, r1 {:.4}, mean gap {:.4e}",
                s.time, s.n_cells, s.ks_stat, s.neighbor_r[0], s.rescale_factor
            );
        }
    }
    if let Some(c) = &m.count_test {
        say!("final count chi2 {:.3} on {} dof, p = {:.4}", c.statistic, c.dof, c.p_value);
    }
    say!(
        "max occupation ratio {:.3}, max gap-growth ratio {:.6}, max length drift {:.1e}",
        m.max_occupation_ratio, m.max_gap_growth_ratio, m.max_length_drift
    );
    for o in run.replicas.iter().filter(|o| o.failure.is_some()) {
        let f = o.failure.as_ref().unwrap();
        eprintln!("replica {} stopped at t = {}: {} ({})", o.replica, f.time, f.check, f.detail);
    }
    Ok(if m.failed_replicas > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn reverse(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = ReverseConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if out.is_some() {
        cfg.out = out;
    }
    let (_, summary) = harness::run_reverse(&cfg)?;
    say!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn verify(quick: bool, seed: u64, only: Vec<u8>, out: Option<PathBuf>) -> Result<ExitCode> {
    let scale = if quick { Scale::Quick } else { Scale::Full };
    let mut results = Vec::new();
    for (id, _) in harness::CRITERIA.iter().filter(|c| only.is_empty() || only.contains(&c.0)) {
        let r = harness::run_criterion(*id, scale, seed)?;
        say!("{}", harness::format_line(&r));
        results.push(r);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    say!("{} of {} criteria passed", results.len() - failed, results.len());
    if let Some(path) = out {
        harness::experiment::write_json(&path, &results)?;
    }
    Ok(if failed > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

#[allow(clippy::too_many_arguments)]
fn chains(
    variant: Variant,
    n: usize,
    target: usize,
    beta: f64,
    t_end: Option<f64>,
    replicas: u64,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for r in 0..replicas {
        let mut rng = replica_rng(seed, r);
        let traj = match variant {
            Variant::Death => sample_death_chain(n, t_end.unwrap_or(f64::INFINITY), &mut rng),
            Variant::R1 => sample_birth_chain(BirthChainSpec::R1 { target }, &mut rng)?,
            Variant::R2 => {
                let t_end = t_end.context("r2 needs --t-end")?;
                sample_birth_chain(BirthChainSpec::R2 { beta, t_end }, &mut rng)?
            }
        };
        serde_json::to_writer(&mut w, &traj)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            canned,
            seed,
            out,
            replicas,
        } => simulate(config, canned, seed, out, replicas),
        Command::Reverse { config, seed, out } => reverse(config, seed, out),
        Command::Verify { quick, seed, only, out } => verify(quick, seed, only, out),
        Command::Chains {
            variant,
            n,
            target,
            beta,
            t_end,
            replicas,
            seed,
            out,
        } => chains(variant, n, target, beta, t_end, replicas, seed, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
