//! The acceptance suite: eleven criteria, each a self-contained seeded run.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::Result;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{run_experiment, with_pool, Check, ExperimentConfig, Outputs, RunOutput, Snapshots, Stop};
use crate::config::{BoundarySpec, Configuration};
use crate::flow::stepper::{flow_map_determinant, integrate, Stepper, StepperOptions};
use crate::flow::{evolve, first_collision, propagate_exact, propagator_volume, Recorder};
use crate::init::{replica_rng, sample_uniform_n, InitialLaw};
use crate::markov::sample_death_chain;
use crate::reversal::{preimage, sample_reversed_trajectory, ReversedStart, SplitSchedule};
use crate::stats::{
    chi_square_counts, ks_test, ks_two_sample, poisson_pmf, poisson_support, tally, MIN_BIN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Reduced replica counts and system sizes, for a fast smoke run.
    Quick,
    /// The stated sizes and tolerances.
    Full,
}

impl Scale {
    fn pick<T>(self, quick: T, full: T) -> T {
        match self {
            Scale::Quick => quick,
            Scale::Full => full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const CRITERIA: [(u8, &str); 11] = [
    (1, "binomial thinning"),
    (2, "conditional uniformity"),
    (3, "all-survive probability"),
    (4, "first-collision law"),
    (5, "poisson invariance"),
    (6, "volume and jacobian"),
    (7, "reversal identity"),
    (8, "self-similarity"),
    (9, "runtime invariants"),
    (10, "backend agreement"),
    (11, "death/birth duality"),
];

/// Runs one criterion; `seed` feeds every random draw.
pub fn run_criterion(id: u8, scale: Scale, seed: u64) -> Result<CriterionResult> {
    let start = Instant::now();
    let seed = seed.wrapping_add(1000 * id as u64);
    let (passed, detail) = match id {
        1 => binomial_thinning(scale, seed)?,
        2 => conditional_uniformity(scale, seed)?,
        3 => all_survive(scale, seed),
        4 => first_collision_law(scale, seed)?,
        5 => poisson_invariance(scale, seed)?,
        6 => volume(scale),
        7 => reversal_identity(scale, seed)?,
        8 => self_similarity(scale, seed)?,
        9 => runtime_invariants(scale, seed)?,
        10 => backend_agreement(scale, seed),
        11 => duality(scale, seed)?,
        _ => anyhow::bail!("no criterion {id}"),
    };
    let name = CRITERIA.iter().find(|c| c.0 == id).map_or("", |c| c.1).to_string();
    Ok(CriterionResult {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn verify(scale: Scale, seed: u64, only: &[u8]) -> Result<Vec<CriterionResult>> {
    CRITERIA
        .iter()
        .map(|c| c.0)
        .filter(|id| only.is_empty() || only.contains(id))
        .map(|id| run_criterion(id, scale, seed))
        .collect()
}

pub fn format_line(r: &CriterionResult) -> String {
    format!(
        "[{}] {:>2} {:<24} {:>8.1}s  {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.id,
        r.name,
        r.seconds,
        r.detail
    )
}

fn unit() -> BoundarySpec {
    BoundarySpec::unit_interval()
}

fn experiment(initial: InitialLaw, boundary: BoundarySpec, stop: Stop, replicas: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: String::new(),
        initial,
        boundary,
        stop,
        snapshots: Snapshots::default(),
        replicas,
        master_seed: seed,
        outputs: Outputs::default(),
        checks: Vec::new(),
        engine: Default::default(),
        horizon: 50.0,
    }
}

/// Replica draws in parallel, collected in replica order.
fn par_replicas<T: Send>(seed: u64, count: u64, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> T + Sync) -> Vec<T> {
    with_pool(|| (0..count).into_par_iter().map(|r| f(&mut replica_rng(seed, r))).collect())
        .expect("thread pool")
}

fn thinning_run(scale: Scale, seed: u64) -> Result<RunOutput> {
    let t = -0.5 * 0.67f64.ln();
    let cfg = experiment(InitialLaw::UniformN { n: 50 }, unit(), Stop::TEnd(t), scale.pick(2000, 10_000), seed);
    run_experiment(&cfg)
}

fn binomial_thinning(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let out = thinning_run(scale, seed)?;
    let chi = out.merged.count_test.ok_or_else(|| anyhow::anyhow!("no count test"))?;
    let fast = out.wall_seconds <= 120.0;
    Ok((
        chi.p_value > 1e-3 && fast,
        format!(
            "chi2 {:.2} on {} dof, p = {:.4} (need > 0.001); {:.1}s (limit 120s)",
            chi.statistic, chi.dof, chi.p_value, out.wall_seconds
        ),
    ))
}

fn conditional_uniformity(scale: Scale, seed: u64) -> Result<(bool, String)> {
    // Same runs as the thinning criterion.
    let out = thinning_run(scale, seed.wrapping_sub(1000))?;
    let min_samples = scale.pick(100, 500);
    let mut by_m: BTreeMap<usize, (u64, Vec<f64>)> = BTreeMap::new();
    for o in &out.replicas {
        let e = by_m.entry(o.final_count).or_default();
        e.0 += 1;
        e.1.extend_from_slice(o.final_config.as_ref().map_or(&[][..], |c| c.positions()));
    }
    let eligible: Vec<_> = by_m.iter().filter(|(_, v)| v.0 >= min_samples).collect();
    // Bonferroni over the conditioning values keeps the family level at 1%.
    let alpha = 0.01 / eligible.len().max(1) as f64;
    let mut worst = 1.0f64;
    let mut parts = Vec::new();
    for (m, (_, xs)) in &eligible {
        let ks = ks_test(xs, |x| x.clamp(0.0, 1.0))?;
        worst = worst.min(ks.p_value);
        parts.push(format!("m={m}:p={:.3}", ks.p_value));
    }
    Ok((
        !eligible.is_empty() && worst > alpha,
        format!("{} values of m; min p = {worst:.4} (need > {alpha:.4}); {}", eligible.len(), parts.join(" ")),
    ))
}

fn all_survive(scale: Scale, seed: u64) -> (bool, String) {
    let reps = scale.pick(20_000u64, 100_000);
    let hits = par_replicas(seed, reps, |rng| {
        let c = sample_uniform_n(3, unit(), rng).expect("sample");
        first_collision(&c, 0.25).is_none()
    });
    let p = hits.iter().filter(|&&h| h).count() as f64 / reps as f64;
    let expect = (-1.5f64).exp();
    let tol = 0.005f64.max(4.0 * (expect * (1.0 - expect) / reps as f64).sqrt());
    (
        (p - expect).abs() <= tol,
        format!("P = {p:.4} vs e^-1.5 = {expect:.4} (tolerance {tol:.4}, {reps} runs)"),
    )
}

fn first_collision_law(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let reps = scale.pick(4000u64, 10_000);
    let times = par_replicas(seed, reps, |rng| {
        let c = sample_uniform_n(5, unit(), rng).expect("sample");
        first_collision(&c, 50.0).map_or(f64::INFINITY, |h| h.0)
    });
    let ks = ks_test(&times, |t| -(-10.0 * t.max(0.0)).exp_m1())?;
    Ok((
        ks.p_value > 0.01,
        format!("KS D = {:.4} vs Exponential(10), p = {:.3} (need > 0.01)", ks.statistic, ks.p_value),
    ))
}

fn poisson_invariance(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let t = 0.5 * 2f64.ln();
    let cfg = experiment(InitialLaw::Poisson { lambda: 200.0 }, unit(), Stop::TEnd(t), scale.pick(2000, 10_000), seed);
    let out = run_experiment(&cfg)?;
    let chi = out.merged.count_test.ok_or_else(|| anyhow::anyhow!("no count test"))?;
    let xs: Vec<f64> = out
        .replicas
        .iter()
        .filter_map(|o| o.final_config.as_ref())
        .flat_map(|c| c.positions().to_vec())
        .collect();
    let ks = ks_test(&xs, |x| x.clamp(0.0, 1.0))?;
    Ok((
        chi.p_value > 0.01 && ks.p_value > 0.01,
        format!(
            "count chi2 p = {:.3} vs Poisson(100); position KS p = {:.3} over {} points (need > 0.01 each)",
            chi.p_value,
            ks.p_value,
            xs.len()
        ),
    ))
}

fn volume(scale: Scale) -> (bool, String) {
    let mut worst_rel: f64 = 0.0;
    for n in 1..=32 {
        for dt in [0.01, 0.1, 1.0] {
            let v = propagator_volume(n, dt);
            let e = (2.0 * n as f64 * dt).exp();
            worst_rel = worst_rel.max((v / e - 1.0).abs());
        }
    }
    let mut worst_fd: f64 = 0.0;
    let n_max = scale.pick(4, 6);
    for n in 1..=n_max {
        for dt in [0.01, 0.1, 1.0] {
            let d = flow_map_determinant(n, dt, StepperOptions::default());
            worst_fd = worst_fd.max((d - propagator_volume(n, dt)).abs());
        }
    }
    (
        worst_rel <= 1e-10 && worst_fd <= 1e-5,
        format!("max relative error {worst_rel:.2e} (need <= 1e-10); integrator determinant off by {worst_fd:.2e} (need <= 1e-5)"),
    )
}

/// Random `(y, schedule, t)` with at most 6 particles and 3 splits.
pub fn random_roundtrip_case<R: Rng>(rng: &mut R) -> (Configuration, SplitSchedule, f64) {
    let k = rng.random_range(0..=3usize);
    let m = rng.random_range(0..=6 - k);
    let mut y: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
    y.sort_by(f64::total_cmp);
    let t = rng.random_range(0.1..1.0);
    // Split times at least 1e-3 apart, so each forward collision is simple.
    let times = loop {
        let mut ts: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.98) * t).collect();
        ts.sort_by(f64::total_cmp);
        if ts.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            break ts;
        }
    };
    let sites = (1..=k).map(|i| rng.random_range(0..=m + k - i + 1)).collect();
    (
        Configuration::new(unit(), y, 0.0).expect("sorted"),
        SplitSchedule::new(times, sites),
        t,
    )
}

/// Worst of position and collision-time error over one roundtrip.
pub fn roundtrip_error(y: &Configuration, sched: &SplitSchedule, t: f64) -> Result<f64> {
    let x = preimage(y, sched, t)?;
    let mut rec = Recorder::new(x.boundary());
    let back = evolve(&x, t, &mut rec)?;
    if back.len() != y.len() || rec.events.len() != sched.len() {
        return Ok(f64::INFINITY);
    }
    let pos = back.positions().iter().zip(y.positions()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tim = rec.events.iter().zip(&sched.times).map(|(e, s)| (e.time - s).abs()).fold(0.0, f64::max);
    Ok(pos.max(tim))
}

fn reversal_identity(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let (lambda, t) = (100.0, 0.5f64);
    let beta = lambda * (-2.0 * t).exp();
    let reps = scale.pick(2000u64, 10_000);
    let counts = par_replicas(seed, reps, |rng| {
        sample_reversed_trajectory(ReversedStart::PoissonMixture { beta, t_end: t }, unit(), rng)
            .map(|r| r.config.len())
            .unwrap_or(usize::MAX)
    });
    let chi = chi_square_counts(&tally(counts), |k| poisson_pmf(lambda, k), poisson_support(lambda), MIN_BIN)?;
    let errs = par_replicas(seed ^ 0x5eed, 1000, |rng| {
        let (y, s, t) = random_roundtrip_case(rng);
        roundtrip_error(&y, &s, t).unwrap_or(f64::INFINITY)
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    Ok((
        chi.p_value > 0.01 && worst <= 1e-8,
        format!(
            "reversed count chi2 p = {:.3} vs Poisson(100) over {reps} runs (need > 0.01); eta roundtrip max error {worst:.2e} over 1000 cases (need <= 1e-8)",
            chi.p_value
        ),
    ))
}

fn self_similarity(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let n = scale.pick(100_000usize, 1_000_000);
    let mut cfg = experiment(
        InitialLaw::PoissonVoronoi { n_seeds: n },
        BoundarySpec::Periodic { length: n as f64 },
        Stop::SurvivalFraction(0.01),
        1,
        seed,
    );
    cfg.snapshots = Snapshots::Fractions(vec![1.0, 0.5, 0.1, 0.01]);
    cfg.checks = Check::ALL.to_vec();
    // The initial state is regenerated from the same stream for the
    // density check.
    let x0 = cfg.initial.sample(cfg.boundary, &mut replica_rng(seed, 0))?;
    let out = run_experiment(&cfg)?;
    let o = &out.replicas[0];
    let ks: Vec<f64> = o.snapshots.iter().map(|s| s.as_ref().map_or(f64::NAN, |s| s.ks_stat)).collect();
    let decreasing = ks.windows(2).all(|w| w[1] < w[0]);
    // Gaps two apart share no seed spacing, so every other gap is an
    // independent draw from 4x e^{-2x}.
    let g = x0.gaps().into_inner();
    let even: Vec<f64> = g.iter().step_by(2).copied().collect();
    let init = ks_test(&even, |x| if x > 0.0 { 1.0 - (1.0 + 2.0 * x) * (-2.0 * x).exp() } else { 0.0 })?;
    let limit = scale.pick(0.03, 0.01);
    let last = *ks.last().unwrap_or(&f64::NAN);
    let fast = out.wall_seconds <= 600.0;
    Ok((
        decreasing && last < limit && init.p_value > 0.01 && o.failure.is_none() && fast,
        format!(
            "{n} cells; KS at fractions 1/0.5/0.1/0.01 = {} (strictly decreasing: {decreasing}; last < {limit}: {}); initial 4x e^-2x KS p = {:.3}; {:.1}s (limit 600s)",
            ks.iter().map(|k| format!("{k:.4}")).collect::<Vec<_>>().join("/"),
            last < limit,
            init.p_value,
            out.wall_seconds
        ),
    ))
}

fn runtime_invariants(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let mut runs = Vec::new();
    let uniform = experiment(InitialLaw::UniformN { n: 50 }, unit(), Stop::TEnd(2.0), scale.pick(200, 1000), seed);
    runs.push(run_experiment(&uniform)?);
    let poisson = experiment(InitialLaw::Poisson { lambda: 200.0 }, unit(), Stop::TEnd(1.0), scale.pick(50, 200), seed + 1);
    runs.push(run_experiment(&poisson)?);
    let n = scale.pick(20_000usize, 100_000);
    let voronoi = experiment(
        InitialLaw::PoissonVoronoi { n_seeds: n },
        BoundarySpec::Periodic { length: n as f64 },
        Stop::SurvivalFraction(0.01),
        1,
        seed + 2,
    );
    runs.push(run_experiment(&voronoi)?);

    let outcomes: Vec<_> = runs.iter().flat_map(|r| r.replicas.iter()).collect();
    let total = outcomes.len();
    let count = |name: &str| outcomes.iter().filter(|o| o.violations.iter().any(|v| v.check == name)).count();
    let max_ratio = outcomes.iter().map(|o| o.occupation_ratio).fold(0.0, f64::max);
    let over = outcomes.iter().filter(|o| o.occupation_ratio > 1.0).count();
    let growth = count("gap_growth");
    let monotone = count("monotone_count");
    let drift = outcomes.iter().map(|o| o.length_drift).fold(0.0, f64::max);
    let twice = count("occupation");
    Ok((
        max_ratio <= 1.0 && growth == 0 && monotone == 0 && drift <= 1e-9,
        format!(
            "{total} runs; occupation/(window*t) max {max_ratio:.3}, {over} runs above 1 (bound 2Lt), {twice} above 2; gap-growth violations {growth}; count rises {monotone}; length drift {drift:.1e}"
        ),
    ))
}

fn backend_agreement(scale: Scale, seed: u64) -> (bool, String) {
    let reps = scale.pick(30u64, 100);
    let errs = par_replicas(seed, reps, |rng| {
        let n = rng.random_range(1..=64usize);
        let c = sample_uniform_n(n, unit(), rng).expect("sample");
        let Some((tau, _)) = first_collision(&c, 50.0) else {
            return (0.0, 0.0);
        };
        let mut pos_err: f64 = 0.0;
        for k in 0..8 {
            let s = tau * k as f64 / 8.0;
            let a = propagate_exact(&c, s).expect("flow");
            let b = integrate(unit(), c.positions(), s, StepperOptions::default());
            for (x, y) in a.positions().iter().zip(&b) {
                pos_err = pos_err.max((x - y).abs());
            }
        }
        let mut st = Stepper::new(unit(), c.positions(), StepperOptions::default());
        let tol = c.merge_threshold(&Default::default());
        let t_err = st.advance_to_collision(2.0 * tau + 1.0, tol).map_or(f64::INFINITY, |t| (t - tau).abs());
        (pos_err, t_err)
    });
    let pos = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let tim = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    (
        pos <= 1e-8 && tim <= 1e-8,
        format!("{reps} starts, n <= 64: sup-norm gap {pos:.2e}, collision-time gap {tim:.2e} (need <= 1e-8 each)"),
    )
}

fn duality(scale: Scale, seed: u64) -> Result<(bool, String)> {
    let n = 10;
    let reps = scale.pick(2000u64, 10_000);
    let reversed: Vec<Vec<f64>> = par_replicas(seed, reps, |rng| {
        let run = sample_reversed_trajectory(ReversedStart::MuStar { target: n }, unit(), rng).expect("reversal");
        let mut t: Vec<f64> = run.splits.iter().map(|s| s.t).collect();
        t.sort_by(f64::total_cmp);
        t
    });
    let death: Vec<Vec<f64>> =
        par_replicas(seed ^ 0xdead, reps, |rng| sample_death_chain(n, f64::INFINITY, rng).jump_times());
    // One two-sample test per jump index, Bonferroni over the ten.
    let alpha = 0.01 / n as f64;
    let mut worst = 1.0f64;
    for j in 0..n {
        let a: Vec<f64> = reversed.iter().map(|t| t[j]).collect();
        let b: Vec<f64> = death.iter().map(|t| t[j]).collect();
        worst = worst.min(ks_two_sample(&a, &b)?.p_value);
    }
    Ok((
        worst > alpha,
        format!("{reps} runs each, n = {n}: min per-jump two-sample KS p = {worst:.4} (need > {alpha:.4})"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_criteria_pass_quickly() {
        for id in [3, 6] {
            let r = run_criterion(id, Scale::Quick, 1).unwrap();
            assert!(r.passed, "{}", format_line(&r));
        }
        assert!(run_criterion(12, Scale::Quick, 1).is_err());
    }

    #[test]
    fn roundtrip_cases_are_exact() {
        let mut rng = replica_rng(5, 0);
        for _ in 0..50 {
            let (y, s, t) = random_roundtrip_case(&mut rng);
            assert!(roundtrip_error(&y, &s, t).unwrap() <= 1e-8);
        }
    }
}
