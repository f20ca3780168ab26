//! Distributional diagnostics for gap sequences and count samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::config::Configuration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no values")]
    Empty,
    #[error("need more than {need} values (got {got})")]
    TooShort { need: usize, got: usize },
    #[error("degenerate variance: correlation undefined")]
    Degenerate,
    #[error("pmf sums to {0} over the support, not 1")]
    PmfMass(f64),
    #[error("observation {0} lies outside the support")]
    OutsideSupport(usize),
    #[error("fewer than two bins remain after merging")]
    TooFewBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RescaleMode {
    /// Multiply by `intensity e^{-2t}`: the mean gap of an intensity
    /// `intensity` Poisson start grows as `e^{2t} / intensity`.
    ExponentialRate { t: f64, intensity: f64 },
    /// Divide by the empirical mean gap.
    EmpiricalMean,
}

pub fn rescale_values(gaps: &[f64], mode: RescaleMode) -> Result<Vec<f64>, StatsError> {
    if gaps.is_empty() {
        return Err(StatsError::Empty);
    }
    let factor = match mode {
        RescaleMode::ExponentialRate { t, intensity } => intensity * (-2.0 * t).exp(),
        RescaleMode::EmpiricalMean => gaps.len() as f64 / gaps.iter().sum::<f64>(),
    };
    Ok(gaps.iter().map(|g| g * factor).collect())
}

pub fn rescale_gaps(config: &Configuration, mode: RescaleMode) -> Result<Vec<f64>, StatsError> {
    let gaps = if config.is_empty() {
        Vec::new()
    } else {
        config.gaps().into_inner()
    };
    rescale_values(&gaps, mode)
}

/// `sup_x |F_n(x) - F(x)|` for a continuous `F`.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max))
}

/// Distance to the unit exponential law.
pub fn ks_exponential(values: &[f64]) -> Result<f64, StatsError> {
    ks_statistic(values, |x| if x > 0.0 { -(-x).exp_m1() } else { 0.0 })
}

/// Asymptotic Kolmogorov tail `P(D > d)` for an effective sample size `n`,
/// with the usual small-sample correction of the argument.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as usize % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_test(values: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsTest, StatsError> {
    let d = ks_statistic(values, cdf)?;
    Ok(KsTest {
        statistic: d,
        p_value: ks_pvalue(d, values.len() as f64),
    })
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsTest {
        statistic: d,
        p_value: ks_pvalue(d, na * nb / (na + nb)),
    })
}

/// Pearson correlation of `(g_i, g_{i+lag})` over the circular sequence.
pub fn neighbor_correlation(gaps: &[f64], lag: usize) -> Result<f64, StatsError> {
    let n = gaps.len();
    if lag == 0 || n <= lag + 1 {
        return Err(StatsError::TooShort { need: lag + 1, got: n });
    }
    let mut s = CorrelationSums::new(lag);
    s.add(gaps);
    s.correlation(lag).ok_or(StatsError::Degenerate)
}

/// Sufficient statistics for circular lag correlations; merge by addition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSums {
    pub n: f64,
    pub sum: f64,
    pub sum_sq: f64,
    /// `cross[l - 1] = sum_i g_i g_{i+l}`.
    pub cross: Vec<f64>,
}

impl CorrelationSums {
    pub fn new(max_lag: usize) -> Self {
        CorrelationSums {
            cross: vec![0.0; max_lag],
            ..Default::default()
        }
    }

    pub fn add(&mut self, g: &[f64]) {
        let n = g.len();
        if n == 0 {
            return;
        }
        self.n += n as f64;
        self.sum += g.iter().sum::<f64>();
        self.sum_sq += g.iter().map(|x| x * x).sum::<f64>();
        for (l, c) in self.cross.iter_mut().enumerate() {
            *c += (0..n).map(|i| g[i] * g[(i + l + 1) % n]).sum::<f64>();
        }
    }

    pub fn merge(&mut self, o: &CorrelationSums) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        if self.cross.len() < o.cross.len() {
            self.cross.resize(o.cross.len(), 0.0);
        }
        for (a, b) in self.cross.iter_mut().zip(&o.cross) {
            *a += b;
        }
    }

    pub fn correlation(&self, lag: usize) -> Option<f64> {
        let c = *self.cross.get(lag.checked_sub(1)?)?;
        let m = self.sum / self.n;
        let var = self.sum_sq / self.n - m * m;
        if var.is_nan() || var <= 1e-14 * m * m {
            return None;
        }
        Some((c / self.n - m * m) / var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Default smallest expected count per bin.
pub const MIN_BIN: f64 = 5.0;

/// Pearson goodness of fit over `support`. Consecutive bins are pooled until
/// each expects at least `min_bin` counts; a short tail joins the last bin.
pub fn chi_square_counts(
    observed: &BTreeMap<usize, u64>,
    pmf: impl Fn(usize) -> f64,
    support: RangeInclusive<usize>,
    min_bin: f64,
) -> Result<ChiSquare, StatsError> {
    let total: u64 = observed.values().sum();
    if total == 0 {
        return Err(StatsError::Empty);
    }
    if let Some((&k, _)) = observed.iter().find(|(k, _)| !support.contains(k)) {
        return Err(StatsError::OutsideSupport(k));
    }
    let probs: Vec<f64> = support.clone().map(&pmf).collect();
    let mass: f64 = probs.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(StatsError::PmfMass(mass));
    }
    let n = total as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut e, mut o) = (0.0, 0.0);
    for (k, p) in support.zip(&probs) {
        e += p * n;
        o += observed.get(&k).copied().unwrap_or(0) as f64;
        if e >= min_bin {
            bins.push((o, e));
            e = 0.0;
            o = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => bins.push((o, e)),
        }
    }
    if bins.len() < 2 {
        return Err(StatsError::TooFewBins);
    }
    let statistic: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = bins.len() - 1;
    let p_value = ChiSquared::new(dof as f64).map_or(f64::NAN, |d| d.sf(statistic));
    Ok(ChiSquare {
        statistic,
        dof,
        p_value,
    })
}

/// Counts of a sample of integers.
pub fn tally(values: impl IntoIterator<Item = usize>) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for v in values {
        *m.entry(v).or_insert(0) += 1;
    }
    m
}

/// `Poisson(mean)` pmf, evaluated in log space.
pub fn poisson_pmf(mean: f64, k: usize) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * mean.ln() - mean - statrs::function::factorial::ln_factorial(k as u64)).exp()
}

/// Range holding all but `1e-13` of the `Poisson(mean)` mass.
pub fn poisson_support(mean: f64) -> RangeInclusive<usize> {
    let sd = mean.sqrt();
    let hi = (mean + 12.0 * sd + 30.0).ceil() as usize;
    0..=hi
}

pub const HIST_BINS: usize = 100;
pub const HIST_MAX: f64 = 6.0;

/// Fixed-width histogram on `[0, HIST_MAX)` with an overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            edges: (0..=HIST_BINS).map(|i| HIST_MAX * i as f64 / HIST_BINS as f64).collect(),
            counts: vec![0; HIST_BINS],
            overflow: 0,
        }
    }
}

impl Histogram {
    pub fn from_values(values: &[f64]) -> Self {
        let mut h = Histogram::default();
        for &v in values {
            h.add(v);
        }
        h
    }

    pub fn add(&mut self, v: f64) {
        if v >= HIST_MAX {
            self.overflow += 1;
        } else {
            let i = ((v.max(0.0) / HIST_MAX) * HIST_BINS as f64) as usize;
            self.counts[i.min(HIST_BINS - 1)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }

    pub fn merge(&mut self, o: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
        self.overflow += o.overflow;
    }

    /// `bin_lo,bin_hi,count`, overflow last with an infinite upper edge.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        writeln!(w, "{},inf,{}", HIST_MAX, self.overflow)
    }
}

/// Run-level counters carried alongside the gap statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub occupation_integral: f64,
    pub occupation_elapsed: f64,
    pub gap_growth_max_ratio: f64,
    pub events: u64,
    pub violations: u64,
}

/// Snapshot statistics of mean-normalized gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub time: f64,
    pub n_cells: u64,
    /// Mean gap; gaps are divided by this before binning.
    pub rescale_factor: f64,
    pub histogram: Histogram,
    /// Distance to the unit exponential; after merging, the cell-weighted
    /// mean of the merged reports.
    pub ks_stat: f64,
    pub chi2: Option<(f64, usize)>,
    /// Lag correlations for lags 1, 2, 3.
    pub neighbor_r: Vec<f64>,
    pub correlation: CorrelationSums,
    pub counters: Counters,
    /// Mean gap divided by `e^{2t} / intensity`, when an intensity is known.
    pub mean_gap_ratio: Option<f64>,
}

pub const REPORT_LAGS: usize = 3;

impl StatsReport {
    /// Statistics of the gaps of one configuration (periodic gaps are a
    /// circular sequence).
    pub fn from_gaps(gaps: &[f64], time: f64) -> Result<Self, StatsError> {
        let values = rescale_values(gaps, RescaleMode::EmpiricalMean)?;
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let mut correlation = CorrelationSums::new(REPORT_LAGS);
        correlation.add(&values);
        let neighbor_r = (1..=REPORT_LAGS)
            .map(|l| {
                if values.len() > l + 1 {
                    correlation.correlation(l).unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                }
            })
            .collect();
        Ok(StatsReport {
            time,
            n_cells: gaps.len() as u64,
            rescale_factor: mean,
            histogram: Histogram::from_values(&values),
            ks_stat: ks_exponential(&values)?,
            chi2: None,
            neighbor_r,
            correlation,
            counters: Counters::default(),
            mean_gap_ratio: None,
        })
    }

    pub fn from_configuration(config: &Configuration) -> Result<Self, StatsError> {
        if config.is_empty() {
            return Err(StatsError::Empty);
        }
        Self::from_gaps(config.gaps().as_slice(), config.time())
    }

    /// Associative pooling: histograms and sums add; time, KS and the
    /// rescale factor average with cell weights.
    pub fn merge(&mut self, o: &StatsReport) {
        let (a, b) = (self.n_cells as f64, o.n_cells as f64);
        let w = if a + b > 0.0 { b / (a + b) } else { 0.0 };
        self.time += w * (o.time - self.time);
        self.ks_stat += w * (o.ks_stat - self.ks_stat);
        self.rescale_factor += w * (o.rescale_factor - self.rescale_factor);
        self.mean_gap_ratio = match (self.mean_gap_ratio, o.mean_gap_ratio) {
            (Some(x), Some(y)) => Some(x + w * (y - x)),
            _ => None,
        };
        self.n_cells += o.n_cells;
        self.histogram.merge(&o.histogram);
        self.correlation.merge(&o.correlation);
        self.neighbor_r = (1..=REPORT_LAGS)
            .map(|l| self.correlation.correlation(l).unwrap_or(f64::NAN))
            .collect();
        self.counters.occupation_integral += o.counters.occupation_integral;
        self.counters.occupation_elapsed += o.counters.occupation_elapsed;
        self.counters.gap_growth_max_ratio = self.counters.gap_growth_max_ratio.max(o.counters.gap_growth_max_ratio);
        self.counters.events += o.counters.events;
        self.counters.violations += o.counters.violations;
        self.chi2 = None;
    }
}

pub const SNAPSHOT_CSV_HEADER: &str = "time,n_cells,ks_stat,neighbor_r_lag1,mean_gap";

pub fn snapshot_csv_row(r: &StatsReport) -> String {
    format!(
        "{},{},{},{},{}",
        r.time,
        r.n_cells,
        r.ks_stat,
        r.neighbor_r.first().copied().unwrap_or(f64::NAN),
        r.rescale_factor
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::replica_rng;
    use proptest::prelude::*;
    use rand::distr::Distribution;
    use rand_distr::{Binomial, Exp1, Poisson};

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_values(&[2.0, 4.0, 6.0], RescaleMode::EmpiricalMean).unwrap(), vec![0.5, 1.0, 1.5]);
        let id = rescale_values(&[0.3, 0.7], RescaleMode::ExponentialRate { t: 0.0, intensity: 1.0 }).unwrap();
        assert_eq!(id, vec![0.3, 0.7]);
        assert_eq!(rescale_values(&[], RescaleMode::EmpiricalMean), Err(StatsError::Empty));
    }

    #[test]
    fn ks_examples() {
        let ones = vec![1.0; 50];
        let d = ks_exponential(&ones).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((d - (1.0 - e1).max(e1)).abs() < 1e-15);
        assert!((d - 0.6321).abs() < 1e-4);

        let mut rng = replica_rng(21, 0);
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
        assert!(ks_exponential(&v).unwrap() < 1.627 / (n as f64).sqrt());
        assert!(ks_exponential(&[]).is_err());
    }

    #[test]
    fn ks_distance_between_gamma22_and_exponential() {
        // sup_x |(1 + 2x) e^{-2x} - e^{-x}| by a fine scan, against the KS
        // statistic of a large Gamma(2, 2) sample.
        let gap = (0..200_000)
            .map(|i| {
                let x = i as f64 * 1e-4;
                ((1.0 + 2.0 * x) * (-2.0 * x).exp() - (-x).exp()).abs()
            })
            .fold(0.0, f64::max);
        assert!((gap - 0.1395).abs() < 1e-3, "{gap}");
        let mut rng = replica_rng(22, 0);
        let v = crate::init::GapLaw::Gamma { shape: 2.0, rate: 2.0 }.sample_gaps(100_000, &mut rng).unwrap();
        assert!((ks_exponential(&v).unwrap() - gap).abs() < 0.01);
    }

    #[test]
    fn ks_pvalue_matches_critical_value() {
        // 1.627 / sqrt(n) is the asymptotic 1% point.
        let n = 1e6f64;
        let p = ks_pvalue(1.6276 / n.sqrt(), n);
        assert!((p - 0.01).abs() < 5e-4, "{p}");
        let t = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.statistic, 0.0);
        let t = ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(t.statistic, 1.0);
    }

    #[test]
    fn correlation_examples() {
        let mut rng = replica_rng(23, 0);
        let n = 100_000;
        let e: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
        assert!(neighbor_correlation(&e, 1).unwrap().abs() < 3.0 / (n as f64).sqrt());
        let v: Vec<f64> = (0..n).map(|i| 0.5 * (e[i] + e[(i + 1) % n])).collect();
        assert!((neighbor_correlation(&v, 1).unwrap() - 0.5).abs() < 0.015);
        assert!(neighbor_correlation(&v, 2).unwrap().abs() < 4.0 / (n as f64).sqrt());
        assert_eq!(neighbor_correlation(&[1.0; 10], 1), Err(StatsError::Degenerate));
        assert!(neighbor_correlation(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn chi_square_examples() {
        let pmf = |k: usize| crate::markov::death_kernel(4, 0.5 * 2f64.ln(), k).unwrap();
        // Bin(4, 1/2) times 1600: exactly proportional.
        let obs: BTreeMap<usize, u64> = [(0, 100), (1, 400), (2, 600), (3, 400), (4, 100)].into();
        let c = chi_square_counts(&obs, pmf, 0..=4, MIN_BIN).unwrap();
        assert!(c.statistic.abs() < 1e-12);
        assert_eq!(c.dof, 4);

        let mut rng = replica_rng(24, 0);
        let b = Binomial::new(50, 0.5).unwrap();
        let draws = tally((0..100_000).map(|_| b.sample(&mut rng) as usize));
        let c = chi_square_counts(&draws, |k| crate::markov::death_kernel(50, 0.5 * 2f64.ln(), k).unwrap(), 0..=50, MIN_BIN)
            .unwrap();
        assert!(c.p_value > 0.01, "{c:?}");

        let p = Poisson::new(10.0).unwrap();
        let draws = tally((0..100_000).map(|_| p.sample(&mut rng) as usize));
        let c = chi_square_counts(&draws, |k| poisson_pmf(11.0, k), poisson_support(11.0), MIN_BIN).unwrap();
        assert!(c.p_value < 0.01);

        assert!(matches!(
            chi_square_counts(&obs, |_| 0.1, 0..=4, MIN_BIN),
            Err(StatsError::PmfMass(_))
        ));
        assert!(matches!(chi_square_counts(&obs, pmf, 0..=3, MIN_BIN), Err(StatsError::OutsideSupport(4))));
    }

    #[test]
    fn histogram_and_report() {
        let r = StatsReport::from_gaps(&[1.0, 2.0, 3.0, 100.0], 0.5).unwrap();
        assert_eq!(r.histogram.total(), 4);
        assert_eq!(r.histogram.overflow, 0);
        let mut csv = Vec::new();
        r.histogram.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), HIST_BINS + 2);
        let mut a = r.clone();
        a.merge(&r);
        assert_eq!(a.n_cells, 8);
        assert!((a.ks_stat - r.ks_stat).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn empirical_mean_rescale_has_unit_mean(v in prop::collection::vec(0.001f64..100.0, 1..200)) {
            let r = rescale_values(&v, RescaleMode::EmpiricalMean).unwrap();
            let m = r.iter().sum::<f64>() / r.len() as f64;
            prop_assert!((m - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ks_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..5.0, 1..100), seed in 0u64..1000) {
            let a = ks_exponential(&v).unwrap();
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            prop_assert_eq!(a, ks_exponential(&v).unwrap());
        }

        #[test]
        fn chi_square_is_relabeling_invariant(counts in prop::collection::vec(50u64..200, 4)) {
            let pmf = [0.1, 0.2, 0.3, 0.4];
            let obs: BTreeMap<usize, u64> = counts.iter().copied().enumerate().collect();
            let a = chi_square_counts(&obs, |k| pmf[k], 0..=3, MIN_BIN).unwrap();
            let perm = [2usize, 0, 3, 1];
            let obs2: BTreeMap<usize, u64> = obs.iter().map(|(&k, &c)| (perm[k], c)).collect();
            let b = chi_square_counts(&obs2, |k| pmf[perm.iter().position(|&p| p == k).unwrap()], 0..=3, MIN_BIN).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
        }
    }
}
