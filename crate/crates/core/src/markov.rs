//! Reference laws for the particle-count chains: the pure death chain with
//! its binomial kernel and jump-time density, and the two birth chains that
//! drive the reversed dynamics.

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::init::poisson_count;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("state {m} outside 0..={n}")]
    StateOutOfRange { n: usize, m: usize },
    #[error("time must be finite and nonnegative (got {0})")]
    BadTime(f64),
    #[error("jump times must be nonnegative and nondecreasing")]
    NonMonotone,
    #[error("{k} jumps requested from state {n}")]
    TooManyJumps { n: usize, k: usize },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Above this size binomial coefficients are evaluated in log space.
pub const LOG_SPACE_ABOVE: usize = 300;

fn check_time(t: f64) -> Result<(), MarkovError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(MarkovError::BadTime(t))
    }
}

/// `P(n -> m in time t) = C(n, m) e^{-2tm} (1 - e^{-2t})^{n-m}`.
pub fn death_kernel(n: usize, t: f64, m: usize) -> Result<f64, MarkovError> {
    if m > n {
        return Err(MarkovError::StateOutOfRange { n, m });
    }
    check_time(t)?;
    if t == 0.0 {
        return Ok(if m == n { 1.0 } else { 0.0 });
    }
    let lp = -2.0 * t;
    let lq = (-(-2.0 * t).exp_m1()).ln();
    let log_tail = lp * m as f64 + lq * (n - m) as f64;
    if n > LOG_SPACE_ABOVE {
        return Ok((ln_binomial(n as u64, m as u64) + log_tail).exp());
    }
    let k = m.min(n - m);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    Ok(c * log_tail.exp())
}

/// Joint density of the first `k` jump times of the death chain from `n`:
/// `2^k n (n-1) ... (n-k+1) exp(-sum_j 2 (n-j+1) (t_j - t_{j-1}))`, `t_0 = 0`.
pub fn jump_time_density(n: usize, times: &[f64]) -> Result<f64, MarkovError> {
    let k = times.len();
    if k > n {
        return Err(MarkovError::TooManyJumps { n, k });
    }
    let mut prev = 0.0;
    let mut log = 0.0;
    for (j, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < prev {
            return Err(MarkovError::NonMonotone);
        }
        let rate = 2.0 * (n - j) as f64;
        log += rate.ln() - rate * (t - prev);
        prev = t;
    }
    Ok(log.exp())
}

/// Trajectory of a pure jump chain. Serialized as `{"x0": n, "jumps": [[t, k], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrajectory {
    #[serde(rename = "x0")]
    pub initial_state: usize,
    pub jumps: Vec<(f64, usize)>,
}

impl ChainTrajectory {
    pub fn final_state(&self) -> usize {
        self.jumps.last().map_or(self.initial_state, |j| j.1)
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| j.0).collect()
    }
}

/// Death chain from `n`: every particle dies independently at rate 2, so the
/// holding time in state `k` is `Exponential(2k)`. `t_end` may be infinite.
pub fn sample_death_chain<R: Rng + ?Sized>(n: usize, t_end: f64, rng: &mut R) -> ChainTrajectory {
    let mut jumps = Vec::with_capacity(n);
    let mut t = 0.0;
    let mut k = n;
    while k > 0 {
        let e: f64 = Exp1.sample(rng);
        t += e / (2.0 * k as f64);
        if t > t_end {
            break;
        }
        k -= 1;
        jumps.push((t, k));
    }
    ChainTrajectory {
        initial_state: n,
        jumps,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", deny_unknown_fields)]
pub enum BirthChainSpec {
    /// Starts at 1 with birth rate `2k`; stops on reaching `target + 1`.
    R1 { target: usize },
    /// Starts at `Poisson(beta)`; births at rate `2 beta e^{2s}` up to `t_end`.
    R2 { beta: f64, t_end: f64 },
}

pub fn sample_birth_chain<R: Rng + ?Sized>(spec: BirthChainSpec, rng: &mut R) -> Result<ChainTrajectory, MarkovError> {
    match spec {
        BirthChainSpec::R1 { target } => {
            let mut jumps = Vec::with_capacity(target);
            let mut t = 0.0;
            let mut k = 1;
            while k <= target {
                let e: f64 = Exp1.sample(rng);
                t += e / (2.0 * k as f64);
                k += 1;
                jumps.push((t, k));
            }
            Ok(ChainTrajectory {
                initial_state: 1,
                jumps,
            })
        }
        BirthChainSpec::R2 { beta, t_end } => {
            if !(beta.is_finite() && beta > 0.0) {
                return Err(MarkovError::BadParameter(format!("beta must be positive (got {beta})")));
            }
            check_time(t_end)?;
            let x0 = poisson_count(beta, rng).map_err(|e| MarkovError::BadParameter(e.to_string()))?;
            Ok(ChainTrajectory {
                initial_state: x0,
                jumps: r2_births(beta, t_end, x0, rng),
            })
        }
    }
}

/// Birth times of rate `2 beta e^{2s}` on `[0, t_end]`, by inverting the
/// cumulative rate `beta (e^{2s} - 1)`: from `s` the next birth is at
/// `ln(e^{2s} + E / beta) / 2` with `E ~ Exponential(1)`.
pub(crate) fn r2_births<R: Rng + ?Sized>(beta: f64, t_end: f64, x0: usize, rng: &mut R) -> Vec<(f64, usize)> {
    let mut jumps = Vec::new();
    let mut w = 1.0;
    let stop = (2.0 * t_end).exp();
    let mut k = x0;
    loop {
        let e: f64 = Exp1.sample(rng);
        w += e / beta;
        if w > stop {
            break;
        }
        k += 1;
        jumps.push((0.5 * w.ln(), k));
    }
    jumps
}
