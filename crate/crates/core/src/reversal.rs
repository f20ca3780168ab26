//! Backward flow punctuated by splits: the pre-image map and the randomized
//! time-reversed sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BoundarySpec, ConfigError, Configuration};
use crate::flow::{propagate_backward, CollisionEvent, FlowError};
use crate::init::{sample_poisson, InitError};
use crate::markov::{r2_births, sample_birth_chain, BirthChainSpec, MarkovError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReversalError {
    #[error("split times must be sorted and lie in [0, {t}]")]
    BadTimes { t: f64 },
    #[error("times and sites differ in length ({times} vs {sites})")]
    LengthMismatch { times: usize, sites: usize },
    #[error("split {step}: {source}")]
    Site { step: usize, source: ConfigError },
    #[error("point {u} lies outside the domain")]
    OutsideDomain { u: f64 },
    #[error("reversal needs fixed endpoints")]
    NeedsFixed,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// Sum of the two cells adjacent to each site; endpoints get their single
/// cell. Fixed boundaries give `n + 2` weights summing to twice the length,
/// periodic ones `n` weights with the same sum.
pub fn split_weights(config: &Configuration) -> Vec<f64> {
    let g = config.gaps().into_inner();
    match config.boundary() {
        BoundarySpec::FixedEndpoints { .. } => {
            let m = g.len();
            (0..=m)
                .map(|j| {
                    let lo = if j > 0 { g[j - 1] } else { 0.0 };
                    let hi = if j < m { g[j] } else { 0.0 };
                    lo + hi
                })
                .collect()
        }
        BoundarySpec::Periodic { .. } => {
            let n = g.len();
            (0..n).map(|j| g[(j + n - 1) % n] + g[j]).collect()
        }
    }
}

/// Site index (endpoints included for fixed boundaries, `1..=n` for
/// periodic ones) of the particle nearest `u`. Ties go to the lower index.
pub fn nearest_site(config: &Configuration, u: f64) -> Result<usize, ReversalError> {
    let b = config.boundary();
    let inside = match b {
        BoundarySpec::FixedEndpoints { left, right } => (left..=right).contains(&u),
        BoundarySpec::Periodic { length } => (0.0..length).contains(&u),
    };
    if !inside || (b.is_periodic() && config.is_empty()) {
        return Err(ReversalError::OutsideDomain { u });
    }
    let sites = config.sites();
    let dist = |x: f64| match b {
        BoundarySpec::Periodic { length } => {
            let d = (x - u).abs();
            d.min(length - d)
        }
        BoundarySpec::FixedEndpoints { .. } => (x - u).abs(),
    };
    // Sites are sorted, so the first minimum is the lowest index.
    let (mut best, mut best_d) = (0, f64::INFINITY);
    for (i, &x) in sites.iter().enumerate() {
        let d = dist(x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(match b {
        BoundarySpec::FixedEndpoints { .. } => best,
        BoundarySpec::Periodic { .. } => best + 1,
    })
}

/// Duplicates the particle (or frozen endpoint) nearest `u`.
pub fn nearest_particle_split(config: &Configuration, u: f64) -> Result<Configuration, ReversalError> {
    let site = nearest_site(config, u)?;
    config.embed_split(site).map_err(|source| ReversalError::Site { step: 0, source })
}

/// Split times `t_1 <= ... <= t_k` with one site per time. Site `i` refers to
/// the configuration just after the `i`-th forward collision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSchedule {
    pub times: Vec<f64>,
    pub sites: Vec<usize>,
}

impl SplitSchedule {
    pub fn new(times: Vec<f64>, sites: Vec<usize>) -> Self {
        SplitSchedule { times, sites }
    }

    pub fn empty() -> Self {
        SplitSchedule::new(Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self, t: f64) -> Result<(), ReversalError> {
        if self.times.len() != self.sites.len() {
            return Err(ReversalError::LengthMismatch {
                times: self.times.len(),
                sites: self.sites.len(),
            });
        }
        let sorted = self.times.windows(2).all(|w| w[0] <= w[1]);
        let in_range = self.times.iter().all(|&s| s.is_finite() && (0.0..=t).contains(&s));
        if !sorted || !in_range {
            return Err(ReversalError::BadTimes { t });
        }
        Ok(())
    }
}

/// The pre-image `x` of `y` at time `t` whose forward evolution collides at
/// the scheduled times, each collision undoing the scheduled split. The clock
/// runs back from `t`: flow to the latest split time, split, and repeat.
/// The result carries time 0.
pub fn preimage(y: &Configuration, schedule: &SplitSchedule, t: f64) -> Result<Configuration, ReversalError> {
    schedule.validate(t)?;
    let mut x = y.clone().with_time(t);
    let mut clock = t;
    for (step, (&s, &site)) in schedule.times.iter().zip(&schedule.sites).enumerate().rev() {
        x = propagate_backward(&x, clock - s)?.with_time(s);
        x = x.embed_split(site).map_err(|source| ReversalError::Site { step, source })?;
        clock = s;
    }
    Ok(propagate_backward(&x, clock)?.with_time(0.0))
}

/// Where the reversed run starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReversedStart {
    /// The empty configuration; the first split duplicates an endpoint
    /// chosen by a fair coin, later splits follow the R1 chain until
    /// `target` particles exist.
    MuStar { target: usize },
    /// A `Poisson(beta)` uniform configuration, with R2 births on
    /// `[0, t_end]`.
    PoissonMixture { beta: f64, t_end: f64 },
}

/// One split of the reversed run, stamped with the forward clock (the time at
/// which the forward evolution of the final configuration merges it back).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub t: f64,
    pub site: usize,
    pub x: f64,
}

/// A line of a JSONL event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventRecord {
    Collision(CollisionEvent),
    Split(SplitEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversedRun {
    /// Final configuration, at forward time 0.
    pub config: Configuration,
    /// Total reversed running time.
    pub duration: f64,
    /// Splits in reversed order (decreasing forward time).
    pub splits: Vec<SplitEvent>,
}

pub fn sample_reversed_trajectory<R: Rng + ?Sized>(
    start: ReversedStart,
    boundary: BoundarySpec,
    rng: &mut R,
) -> Result<ReversedRun, ReversalError> {
    let BoundarySpec::FixedEndpoints { left, right } = boundary else {
        return Err(ReversalError::NeedsFixed);
    };
    boundary.validate().map_err(InitError::from)?;
    let (mut x, births, duration) = match start {
        ReversedStart::MuStar { target } => {
            let chain = sample_birth_chain(BirthChainSpec::R1 { target }, rng)?;
            let duration = chain.jumps.last().map_or(0.0, |j| j.0);
            let x = Configuration::empty(boundary).with_time(duration);
            let mut births = Vec::new();
            if target > 0 {
                let site = if rng.random_bool(0.5) { 0 } else { 1 };
                births.push((0.0, Some(site)));
                births.extend(chain.jumps[..target - 1].iter().map(|j| (j.0, None)));
            }
            (x, births, duration)
        }
        ReversedStart::PoissonMixture { beta, t_end } => {
            if !(t_end.is_finite() && t_end >= 0.0) {
                return Err(MarkovError::BadTime(t_end).into());
            }
            let x = sample_poisson(beta, boundary, rng)?.with_time(t_end);
            let births = r2_births(beta, t_end, x.len(), rng);
            (x, births.into_iter().map(|j| (j.0, None)).collect(), t_end)
        }
    };
    let mut clock = 0.0;
    let mut splits = Vec::with_capacity(births.len());
    for (s, forced) in births {
        let forward = duration - s;
        x = propagate_backward(&x, s - clock)?.with_time(forward);
        clock = s;
        let site = match forced {
            Some(site) => site,
            None => nearest_site(&x, rng.random_range(left..=right))?,
        };
        let at = x.sites()[site];
        x = x
            .embed_split(site)
            .map_err(|source| ReversalError::Site { step: splits.len(), source })?;
        splits.push(SplitEvent { t: forward, site, x: at });
    }
    let x = propagate_backward(&x, duration - clock)?.with_time(0.0);
    Ok(ReversedRun {
        config: x,
        duration,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{evolve, Recorder};
    use crate::init::replica_rng;
    use crate::stats::{chi_square_counts, ks_test, poisson_pmf, poisson_support, tally, MIN_BIN};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn unit(pos: &[f64]) -> Configuration {
        Configuration::new(BoundarySpec::unit_interval(), pos.to_vec(), 0.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn weights_examples() {
        assert!(close(&split_weights(&unit(&[0.5])), &[0.5, 1.0, 0.5], 1e-15));
        assert!(close(&split_weights(&unit(&[])), &[1.0, 1.0], 1e-15));
        let w = split_weights(&unit(&[0.2, 0.5]));
        assert!(close(&w, &[0.2, 0.5, 0.8, 0.5], 1e-15));
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-15);
        let p = Configuration::new(BoundarySpec::Periodic { length: 1.0 }, vec![0.1, 0.4, 0.9], 0.0).unwrap();
        assert!(close(&split_weights(&p), &[0.5, 0.8, 0.7], 1e-12));
    }

    #[test]
    fn nearest_examples() {
        let c = unit(&[0.5]);
        assert_eq!(nearest_site(&c, 0.1).unwrap(), 0);
        assert_eq!(nearest_site(&c, 0.6).unwrap(), 1);
        assert_eq!(nearest_site(&c, 0.25).unwrap(), 0);
        assert_eq!(nearest_site(&c, 1.0).unwrap(), 2);
        assert_eq!(nearest_particle_split(&c, 0.1).unwrap().positions(), &[0.0, 0.5]);
        assert_eq!(nearest_particle_split(&c, 0.6).unwrap().positions(), &[0.5, 0.5]);
        assert!(nearest_site(&c, 1.5).is_err());
        let p = Configuration::new(BoundarySpec::Periodic { length: 1.0 }, vec![0.1, 0.5], 0.0).unwrap();
        assert_eq!(nearest_site(&p, 0.95).unwrap(), 1);
    }

    #[test]
    fn split_frequencies_follow_weights() {
        let mut rng = replica_rng(31, 0);
        for _ in 0..5 {
            let c = crate::init::sample_uniform_n(5, BoundarySpec::unit_interval(), &mut rng).unwrap();
            let w = split_weights(&c);
            let obs = tally((0..20_000).map(|_| nearest_site(&c, rng.random::<f64>()).unwrap()));
            let chi = chi_square_counts(&obs, |k| w[k] / 2.0, 0..=6, MIN_BIN).unwrap();
            assert!(chi.p_value > 1e-3, "{chi:?}");
        }
    }

    #[test]
    fn empty_schedule_is_backward_flow() {
        let y = unit(&[0.3, 0.35, 0.9]);
        let x = preimage(&y, &SplitSchedule::empty(), 0.4).unwrap();
        let b = propagate_backward(&y.clone().with_time(0.4), 0.4).unwrap();
        assert_eq!(x.positions(), b.positions());
    }

    #[test]
    fn schedule_validation() {
        let y = unit(&[0.5]);
        assert!(preimage(&y, &SplitSchedule::new(vec![0.3, 0.1], vec![0, 0]), 1.0).is_err());
        assert!(preimage(&y, &SplitSchedule::new(vec![0.3], vec![0, 0]), 1.0).is_err());
        assert!(preimage(&y, &SplitSchedule::new(vec![2.0], vec![0]), 1.0).is_err());
        // Dimension 1 accepts sites 0..=2 only.
        assert!(matches!(
            preimage(&y, &SplitSchedule::new(vec![0.5], vec![3]), 1.0),
            Err(ReversalError::Site { step: 0, .. })
        ));
    }

    /// Random `(y, schedule, t)` with `m + k <= 6`, distinct split times.
    fn random_case<R: rand::Rng>(rng: &mut R) -> (Configuration, SplitSchedule, f64) {
        let k = rng.random_range(0..=3usize);
        let m = rng.random_range(0..=6 - k);
        let mut y: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        y.sort_by(f64::total_cmp);
        let t = rng.random_range(0.1..1.0);
        let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.98) * t).collect();
        times.sort_by(f64::total_cmp);
        // Site i lives in dimension n - i where n = m + k.
        let sites = (1..=k).map(|i| rng.random_range(0..=m + k - i + 1)).collect();
        (unit(&y), SplitSchedule::new(times, sites), t)
    }

    #[test]
    fn preimage_roundtrip() {
        let mut rng = replica_rng(32, 0);
        for _ in 0..300 {
            let (y, sched, t) = random_case(&mut rng);
            let gap = sched.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            if gap < 1e-6 {
                continue;
            }
            let x = preimage(&y, &sched, t).unwrap();
            assert_eq!(x.len(), y.len() + sched.len());
            let mut rec = Recorder::new(x.boundary());
            let back = evolve(&x, t, &mut rec).unwrap();
            assert!(close(back.positions(), y.positions(), 1e-8), "{:?} vs {:?}", back.positions(), y.positions());
            let times: Vec<f64> = rec.events.iter().map(|e| e.time).collect();
            assert!(close(&times, &sched.times, 1e-8), "{times:?} vs {:?}", sched.times);
        }
    }

    #[test]
    fn zero_time_returns_poisson_start() {
        let b = BoundarySpec::unit_interval();
        let run = sample_reversed_trajectory(ReversedStart::PoissonMixture { beta: 30.0, t_end: 0.0 }, b, &mut replica_rng(33, 1))
            .unwrap();
        let direct = sample_poisson(30.0, b, &mut replica_rng(33, 1)).unwrap();
        assert_eq!(run.config, direct);
        assert!(run.splits.is_empty());
        assert!(sample_reversed_trajectory(ReversedStart::MuStar { target: 2 }, BoundarySpec::Periodic { length: 1.0 }, &mut replica_rng(0, 0)).is_err());
    }

    #[test]
    fn forward_evolution_undoes_the_splits() {
        let b = BoundarySpec::unit_interval();
        for (r, start) in [ReversedStart::MuStar { target: 5 }, ReversedStart::PoissonMixture { beta: 8.0, t_end: 0.4 }]
            .into_iter()
            .enumerate()
        {
            let run = sample_reversed_trajectory(start, b, &mut replica_rng(34, r as u64)).unwrap();
            let mut rec = Recorder::new(b);
            // The mu_star endpoint split sits at the very end of the run.
            evolve(&run.config, run.duration + 1e-9, &mut rec).unwrap();
            let mut fwd: Vec<f64> = rec.events.iter().map(|e| e.time).collect();
            fwd.sort_by(f64::total_cmp);
            let mut split: Vec<f64> = run.splits.iter().map(|s| s.t).collect();
            split.sort_by(f64::total_cmp);
            assert!(close(&fwd, &split, 1e-8), "{fwd:?} vs {split:?}");
        }
    }

    #[test]
    fn mu_star_positions_are_uniform() {
        let b = BoundarySpec::unit_interval();
        let mut pooled = Vec::new();
        for r in 0..3000 {
            let run = sample_reversed_trajectory(ReversedStart::MuStar { target: 3 }, b, &mut replica_rng(35, r)).unwrap();
            assert_eq!(run.config.len(), 3);
            pooled.extend_from_slice(run.config.positions());
        }
        let ks = ks_test(&pooled, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn poisson_mixture_count_is_poisson() {
        let b = BoundarySpec::unit_interval();
        let (lambda, t) = (20.0, 0.3f64);
        let beta = lambda * (-2.0 * t).exp();
        let counts = tally((0..4000).map(|r| {
            sample_reversed_trajectory(ReversedStart::PoissonMixture { beta, t_end: t }, b, &mut replica_rng(36, r))
                .unwrap()
                .config
                .len()
        }));
        let chi = chi_square_counts(&counts, |k| poisson_pmf(lambda, k), poisson_support(lambda), MIN_BIN).unwrap();
        assert!(chi.p_value > 0.01, "{chi:?}");
    }

    #[test]
    fn event_record_json() {
        let s = serde_json::to_string(&EventRecord::Split(SplitEvent { t: 0.5, site: 2, x: 0.25 })).unwrap();
        assert_eq!(s, r#"{"kind":"split","t":0.5,"site":2,"x":0.25}"#);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weights_sum_to_twice_the_length(mut v in prop::collection::vec(0.0f64..1.0, 0..20)) {
            v.sort_by(f64::total_cmp);
            let w = split_weights(&unit(&v));
            prop_assert_eq!(w.len(), v.len() + 2);
            prop_assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
    }
}
