//! Seedable samplers for the initial laws.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BoundarySpec, ConfigError, Configuration};

/// Generator used for every stream; recorded in run manifests.
pub const RNG_NAME: &str = "ChaCha8Rng";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("a Voronoi construction needs at least two seeds (got {0})")]
    TooFewSeeds(usize),
    #[error("this law lives on a periodic domain")]
    NeedsPeriodic,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Independent stream `replica` of `master_seed`. Streams never overlap, and
/// a replica's draws do not depend on how many other replicas ran.
pub fn replica_rng(master_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GapLaw {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    Deterministic { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl GapLaw {
    pub fn validate(&self) -> Result<(), InitError> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(InitError::BadParameter(format!("{name} must be positive and finite (got {v})")))
            }
        };
        match *self {
            GapLaw::Exponential { rate } => pos("rate", rate),
            GapLaw::Gamma { shape, rate } => pos("shape", shape).and(pos("rate", rate)),
            GapLaw::Deterministic { value } => pos("value", value),
            GapLaw::Uniform { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo {
                    Ok(())
                } else {
                    Err(InitError::BadParameter(format!("uniform gaps need 0 <= lo < hi (got {lo}, {hi})")))
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            GapLaw::Exponential { rate } => 1.0 / rate,
            GapLaw::Gamma { shape, rate } => shape / rate,
            GapLaw::Deterministic { value } => value,
            GapLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            GapLaw::Exponential { rate } => 1.0 / (rate * rate),
            GapLaw::Gamma { shape, rate } => shape / (rate * rate),
            GapLaw::Deterministic { .. } => 0.0,
            GapLaw::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
        }
    }

    /// Draws `count` IID gaps.
    pub fn sample_gaps<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<f64>, InitError> {
        self.validate()?;
        let bad = |e: String| InitError::BadParameter(e);
        Ok(match *self {
            GapLaw::Exponential { rate } => {
                let d = Exp::new(rate).map_err(|e| bad(e.to_string()))?;
                (0..count).map(|_| d.sample(rng)).collect()
            }
            GapLaw::Gamma { shape, rate } => {
                let d = Gamma::new(shape, 1.0 / rate).map_err(|e| bad(e.to_string()))?;
                (0..count).map(|_| d.sample(rng)).collect()
            }
            GapLaw::Deterministic { value } => vec![value; count],
            GapLaw::Uniform { lo, hi } => (0..count).map(|_| rng.random_range(lo..hi)).collect(),
        })
    }
}

/// `n` IID uniform points on the domain, sorted.
pub fn sample_uniform_n<R: Rng + ?Sized>(n: usize, boundary: BoundarySpec, rng: &mut R) -> Result<Configuration, InitError> {
    boundary.validate()?;
    let lo = boundary.lower();
    let len = boundary.length();
    let mut x: Vec<f64> = (0..n).map(|_| lo + len * rng.random::<f64>()).collect();
    x.sort_by(f64::total_cmp);
    Ok(Configuration::new(boundary, x, 0.0)?)
}

/// Poisson process of intensity `lambda`: a `Poisson(lambda * length)` count
/// of IID uniform points.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, boundary: BoundarySpec, rng: &mut R) -> Result<Configuration, InitError> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(InitError::BadParameter(format!("intensity must be positive (got {lambda})")));
    }
    boundary.validate()?;
    let count = poisson_count(lambda * boundary.length(), rng)?;
    sample_uniform_n(count, boundary, rng)
}

pub(crate) fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<usize, InitError> {
    if mean == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| InitError::BadParameter(e.to_string()))?;
    Ok(d.sample(rng) as usize)
}

/// Midpoints of circularly adjacent seeds, where the seeds are `n_seeds`
/// uniform points on a circle of length `n_seeds` (a unit-intensity Poisson
/// process conditioned on its count). Gaps are `(E_i + E_{i+1}) / 2`, one
/// dependent, with marginal density `4x e^{-2x}` at unit intensity.
pub fn sample_poisson_voronoi<R: Rng + ?Sized>(n_seeds: usize, rng: &mut R) -> Result<Configuration, InitError> {
    if n_seeds < 2 {
        return Err(InitError::TooFewSeeds(n_seeds));
    }
    let length = n_seeds as f64;
    let boundary = BoundarySpec::Periodic { length };
    let seeds = sample_uniform_n(n_seeds, boundary, rng)?;
    let s = seeds.positions();
    let mid: Vec<f64> = (0..n_seeds)
        .map(|i| {
            if i + 1 < n_seeds {
                0.5 * (s[i] + s[i + 1])
            } else {
                0.5 * (s[i] + s[0] + length)
            }
        })
        .collect();
    Ok(Configuration::from_raw(boundary, mid, 0.0))
}

/// Stationary renewal process on a circle: `count` IID gaps, circumference
/// equal to their sum, particles at the partial sums.
pub fn sample_renewal<R: Rng + ?Sized>(law: GapLaw, count: usize, rng: &mut R) -> Result<Configuration, InitError> {
    if count == 0 {
        return Err(InitError::BadParameter("renewal sample needs at least one gap".into()));
    }
    let gaps = law.sample_gaps(count, rng)?;
    let length: f64 = gaps.iter().sum();
    let mut x = Vec::with_capacity(count);
    let mut acc = 0.0;
    for g in &gaps {
        x.push(acc);
        acc += g;
    }
    Ok(Configuration::from_raw(BoundarySpec::Periodic { length }, x, 0.0))
}

/// Initial law of an experiment, as written in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    UniformN { n: usize },
    Poisson { lambda: f64 },
    PoissonVoronoi { n_seeds: usize },
    Renewal { law: GapLaw, count: usize },
}

impl InitialLaw {
    /// Draws a configuration. The last two laws choose their own circle, and
    /// reject a fixed-endpoint boundary.
    pub fn sample<R: Rng + ?Sized>(&self, boundary: BoundarySpec, rng: &mut R) -> Result<Configuration, InitError> {
        match *self {
            InitialLaw::UniformN { n } => sample_uniform_n(n, boundary, rng),
            InitialLaw::Poisson { lambda } => sample_poisson(lambda, boundary, rng),
            InitialLaw::PoissonVoronoi { n_seeds } => {
                if !boundary.is_periodic() {
                    return Err(InitError::NeedsPeriodic);
                }
                sample_poisson_voronoi(n_seeds, rng)
            }
            InitialLaw::Renewal { law, count } => {
                if !boundary.is_periodic() {
                    return Err(InitError::NeedsPeriodic);
                }
                sample_renewal(law, count, rng)
            }
        }
    }

    /// Expected initial particle count, when known in advance.
    pub fn nominal_count(&self, boundary: BoundarySpec) -> f64 {
        match *self {
            InitialLaw::UniformN { n } => n as f64,
            InitialLaw::Poisson { lambda } => lambda * boundary.length(),
            InitialLaw::PoissonVoronoi { n_seeds } => n_seeds as f64,
            InitialLaw::Renewal { count, .. } => count as f64,
        }
    }
}
