//! Particle configurations on a segment with frozen endpoints or on a circle.
//!
//! Site indexing: for [`BoundarySpec::FixedEndpoints`] site `0` is the left
//! endpoint, sites `1..=n` are the interior particles (`positions[i - 1]`) and
//! site `n + 1` is the right endpoint. For [`BoundarySpec::Periodic`] sites are
//! `1..=n` with no endpoints. Endpoints are never stored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("fixed endpoints require left < right (got {left} >= {right})")]
    EmptyInterval { left: f64, right: f64 },
    #[error("periodic length must be positive and finite (got {0})")]
    BadLength(f64),
    #[error("position {index} = {value} is not finite")]
    NonFinite { index: usize, value: f64 },
    #[error("positions are not sorted at index {0}")]
    Unsorted(usize),
    #[error("position {value} lies outside the domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },
    #[error("time must be finite and nonnegative (got {0})")]
    BadTime(f64),
    #[error("split site {site} out of range {lo}..={hi}")]
    SiteOutOfRange { site: usize, lo: usize, hi: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundarySpec {
    #[serde(rename = "fixed")]
    FixedEndpoints { left: f64, right: f64 },
    Periodic { length: f64 },
}

impl BoundarySpec {
    pub fn unit_interval() -> Self {
        BoundarySpec::FixedEndpoints { left: 0.0, right: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            BoundarySpec::FixedEndpoints { left, right } => {
                if !(left.is_finite() && right.is_finite() && left < right) {
                    return Err(ConfigError::EmptyInterval { left, right });
                }
            }
            BoundarySpec::Periodic { length } => {
                if !(length.is_finite() && length > 0.0) {
                    return Err(ConfigError::BadLength(length));
                }
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        match *self {
            BoundarySpec::FixedEndpoints { left, right } => right - left,
            BoundarySpec::Periodic { length } => length,
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, BoundarySpec::Periodic { .. })
    }

    /// Lower end of the canonical coordinate range.
    pub fn lower(&self) -> f64 {
        match *self {
            BoundarySpec::FixedEndpoints { left, .. } => left,
            BoundarySpec::Periodic { .. } => 0.0,
        }
    }
}

/// Distance below which two sites are considered coincident.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeTolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for MergeTolerance {
    fn default() -> Self {
        MergeTolerance {
            abs: 1e-13,
            rel: 1e-15,
        }
    }
}

impl MergeTolerance {
    pub fn threshold(&self, domain_length: f64) -> f64 {
        self.abs.max(self.rel * domain_length)
    }
}

/// Lengths of the 1-cells between consecutive sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GapVector(pub Vec<f64>);

impl GapVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// An ordered set of interior particles together with its boundary and the
/// model time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfiguration")]
pub struct Configuration {
    boundary: BoundarySpec,
    time: f64,
    positions: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfiguration {
    boundary: BoundarySpec,
    #[serde(default)]
    time: f64,
    positions: Vec<f64>,
}

impl TryFrom<RawConfiguration> for Configuration {
    type Error = ConfigError;

    fn try_from(raw: RawConfiguration) -> Result<Self, Self::Error> {
        Configuration::new(raw.boundary, raw.positions, raw.time)
    }
}

impl Configuration {
    pub fn new(boundary: BoundarySpec, positions: Vec<f64>, time: f64) -> Result<Self, ConfigError> {
        boundary.validate()?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(ConfigError::BadTime(time));
        }
        for (index, &value) in positions.iter().enumerate() {
            if !value.is_finite() {
                return Err(ConfigError::NonFinite { index, value });
            }
        }
        if let Some(i) = positions.windows(2).position(|w| w[1] < w[0]) {
            return Err(ConfigError::Unsorted(i + 1));
        }
        let (lo, hi) = match boundary {
            BoundarySpec::FixedEndpoints { left, right } => (left, right),
            BoundarySpec::Periodic { length } => (0.0, length),
        };
        for &value in &positions {
            let outside = match boundary {
                BoundarySpec::FixedEndpoints { .. } => value < lo || value > hi,
                BoundarySpec::Periodic { .. } => value < lo || value >= hi,
            };
            if outside {
                return Err(ConfigError::OutOfDomain { value, lo, hi });
            }
        }
        Ok(Configuration {
            boundary,
            time,
            positions,
        })
    }

    pub fn empty(boundary: BoundarySpec) -> Self {
        Configuration {
            boundary,
            time: 0.0,
            positions: Vec::new(),
        }
    }

    /// Builds a configuration from positions that may carry round-off: values
    /// are clamped into the domain (or wrapped, for periodic boundaries) and
    /// sorted.
    pub fn from_raw(boundary: BoundarySpec, mut positions: Vec<f64>, time: f64) -> Self {
        match boundary {
            BoundarySpec::FixedEndpoints { left, right } => {
                for p in positions.iter_mut() {
                    *p = p.clamp(left, right);
                }
                // Exact flows preserve order; only round-off can break it.
                for i in 1..positions.len() {
                    if positions[i] < positions[i - 1] {
                        positions[i] = positions[i - 1];
                    }
                }
            }
            BoundarySpec::Periodic { length } => {
                for p in positions.iter_mut() {
                    *p = wrap(*p, length);
                }
                positions.sort_by(f64::total_cmp);
            }
        }
        Configuration {
            boundary,
            time: time.max(0.0),
            positions,
        }
    }

    pub fn boundary(&self) -> BoundarySpec {
        self.boundary
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn merge_threshold(&self, tol: &MergeTolerance) -> f64 {
        tol.threshold(self.boundary.length())
    }

    /// Positions including the frozen endpoints (fixed) or the plain interior
    /// positions (periodic), indexed by site.
    pub fn sites(&self) -> Vec<f64> {
        match self.boundary {
            BoundarySpec::FixedEndpoints { left, right } => {
                let mut s = Vec::with_capacity(self.positions.len() + 2);
                s.push(left);
                s.extend_from_slice(&self.positions);
                s.push(right);
                s
            }
            BoundarySpec::Periodic { .. } => self.positions.clone(),
        }
    }

    pub fn gaps(&self) -> GapVector {
        GapVector(gaps_of(&self.positions, self.boundary))
    }

    pub fn velocity(&self) -> Vec<f64> {
        velocity_of(&self.positions, self.boundary)
    }

    /// Merges coincident sites; see [`project`].
    pub fn project(&self, tol: f64) -> (Configuration, Vec<Vec<usize>>) {
        project(self, tol)
    }

    pub fn embed_split(&self, site: usize) -> Result<Configuration, ConfigError> {
        embed_split(self, site)
    }
}

pub(crate) fn wrap(x: f64, length: f64) -> f64 {
    let r = x.rem_euclid(length);
    // rem_euclid can round up to `length` for tiny negative inputs.
    if r >= length {
        0.0
    } else {
        r
    }
}

/// Consecutive differences: for fixed endpoints the `n + 1` cells including
/// both boundary cells, for periodic boundaries the `n` cells with the
/// wraparound cell last.
pub fn gaps_of(positions: &[f64], boundary: BoundarySpec) -> Vec<f64> {
    match boundary {
        BoundarySpec::FixedEndpoints { left, right } => {
            let mut g = Vec::with_capacity(positions.len() + 1);
            let mut prev = left;
            for &p in positions {
                g.push(p - prev);
                prev = p;
            }
            g.push(right - prev);
            g
        }
        BoundarySpec::Periodic { length } => {
            let n = positions.len();
            if n == 0 {
                return Vec::new();
            }
            let mut g: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
            g.push(positions[0] + length - positions[n - 1]);
            g
        }
    }
}

pub fn gaps(config: &Configuration) -> GapVector {
    config.gaps()
}

/// `v_i = 2 x_i - x_{i-1} - x_{i+1}`, with frozen endpoints or cyclic
/// neighbours (shifted by the period) supplying the missing terms.
pub fn velocity_of(positions: &[f64], boundary: BoundarySpec) -> Vec<f64> {
    let n = positions.len();
    match boundary {
        BoundarySpec::FixedEndpoints { left, right } => (0..n)
            .map(|i| {
                let lo = if i == 0 { left } else { positions[i - 1] };
                let hi = if i + 1 == n { right } else { positions[i + 1] };
                (positions[i] - lo) - (hi - positions[i])
            })
            .collect(),
        BoundarySpec::Periodic { length } => (0..n)
            .map(|i| {
                let lo = if i == 0 {
                    positions[n - 1] - length
                } else {
                    positions[i - 1]
                };
                let hi = if i + 1 == n {
                    positions[0] + length
                } else {
                    positions[i + 1]
                };
                (positions[i] - lo) - (hi - positions[i])
            })
            .collect(),
    }
}

pub fn velocity(config: &Configuration) -> Vec<f64> {
    config.velocity()
}

/// Removes repeated entries.
///
/// Sites closer than `tol` to their successor are chained into one group.
/// A group that contains a frozen endpoint is absorbed by it; any other group
/// collapses to a single particle at the group mean. Returns the projected
/// configuration and every group with at least two members, as site indices
/// of the input.
pub fn project(config: &Configuration, tol: f64) -> (Configuration, Vec<Vec<usize>>) {
    let (out, groups) = project_located(config, tol);
    (out, groups.into_iter().map(|(g, _)| g).collect())
}

/// [`project`], also reporting where each group ended up.
pub fn project_located(config: &Configuration, tol: f64) -> (Configuration, Vec<(Vec<usize>, f64)>) {
    let n = config.len();
    let pos = &config.positions;
    match config.boundary {
        BoundarySpec::FixedEndpoints { left, right } => {
            let sites = config.sites();
            let mut out = Vec::with_capacity(n);
            let mut groups = Vec::new();
            let mut start = 0usize;
            for s in 1..=n + 2 {
                let breaks = s == n + 2 || sites[s] - sites[s - 1] > tol;
                if !breaks {
                    continue;
                }
                let members: Vec<usize> = (start..s).collect();
                let location = if start == 0 {
                    left
                } else if s == n + 2 {
                    right
                } else {
                    let mean = members.iter().map(|&k| sites[k]).sum::<f64>() / members.len() as f64;
                    let mean = mean.clamp(left, right);
                    out.push(mean);
                    mean
                };
                if members.len() >= 2 {
                    groups.push((members, location));
                }
                start = s;
            }
            (
                Configuration {
                    boundary: config.boundary,
                    time: config.time,
                    positions: out,
                },
                groups,
            )
        }
        BoundarySpec::Periodic { length } => {
            if n <= 1 {
                return (config.clone(), Vec::new());
            }
            let g = gaps_of(pos, config.boundary);
            // Start the cyclic scan just after a gap that separates two groups.
            let Some(cut) = g.iter().position(|&d| d > tol) else {
                return (config.clone(), Vec::new());
            };
            let first = (cut + 1) % n;
            let mut out = Vec::with_capacity(n);
            let mut groups = Vec::new();
            let mut members = vec![first];
            let mut unwrapped = vec![pos[first]];
            for step in 1..=n {
                let idx = (first + step) % n;
                let prev = (first + step - 1) % n;
                if step < n && g[prev] <= tol {
                    members.push(idx);
                    let last = *unwrapped.last().unwrap();
                    unwrapped.push(last + g[prev]);
                    continue;
                }
                let mean = wrap(unwrapped.iter().sum::<f64>() / unwrapped.len() as f64, length);
                out.push(mean);
                if members.len() >= 2 {
                    let mut grp: Vec<usize> = members.iter().map(|&k| k + 1).collect();
                    grp.sort_unstable();
                    groups.push((grp, mean));
                }
                if step < n {
                    members = vec![idx];
                    unwrapped = vec![pos[idx]];
                }
            }
            out.sort_by(f64::total_cmp);
            groups.sort_by(|a, b| a.0.cmp(&b.0));
            (
                Configuration {
                    boundary: config.boundary,
                    time: config.time,
                    positions: out,
                },
                groups,
            )
        }
    }
}

/// Duplicates site `site`, producing a particle of multiplicity two.
///
/// Fixed endpoints accept `0..=n+1` (0 and `n + 1` duplicate an endpoint into
/// a new interior particle); periodic boundaries accept `1..=n`.
pub fn embed_split(config: &Configuration, site: usize) -> Result<Configuration, ConfigError> {
    let n = config.len();
    let mut positions = config.positions.clone();
    match config.boundary {
        BoundarySpec::FixedEndpoints { left, right } => {
            if site > n + 1 {
                return Err(ConfigError::SiteOutOfRange { site, lo: 0, hi: n + 1 });
            }
            if site == 0 {
                positions.insert(0, left);
            } else if site == n + 1 {
                positions.push(right);
            } else {
                positions.insert(site, positions[site - 1]);
            }
        }
        BoundarySpec::Periodic { .. } => {
            if site == 0 || site > n {
                return Err(ConfigError::SiteOutOfRange { site, lo: 1, hi: n });
            }
            positions.insert(site, positions[site - 1]);
        }
    }
    Ok(Configuration {
        boundary: config.boundary,
        time: config.time,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(pos: &[f64]) -> Configuration {
        Configuration::new(BoundarySpec::unit_interval(), pos.to_vec(), 0.0).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn gaps_examples() {
        assert!(close(unit(&[0.25]).gaps().as_slice(), &[0.25, 0.75]));
        assert!(close(unit(&[]).gaps().as_slice(), &[1.0]));
        let c = Configuration::new(BoundarySpec::Periodic { length: 1.0 }, vec![0.1, 0.4, 0.9], 0.0).unwrap();
        assert!(close(c.gaps().as_slice(), &[0.3, 0.5, 0.2]));
    }

    #[test]
    fn project_examples() {
        let (p, g) = unit(&[0.3, 0.3]).project(0.0);
        assert!(close(p.positions(), &[0.3]));
        assert_eq!(g, vec![vec![1, 2]]);

        let (p, g) = unit(&[0.2, 0.7]).project(0.0);
        assert!(close(p.positions(), &[0.2, 0.7]));
        assert!(g.is_empty());

        let (p, g) = unit(&[0.5, 0.5, 0.5]).project(0.0);
        assert!(close(p.positions(), &[0.5]));
        assert_eq!(g, vec![vec![1, 2, 3]]);
    }

    #[test]
    fn project_absorbs_endpoint_particles() {
        let (p, g) = unit(&[0.0, 0.4, 1.0]).project(0.0);
        assert!(close(p.positions(), &[0.4]));
        assert_eq!(g, vec![vec![0, 1], vec![3, 4]]);
    }

    #[test]
    fn project_merges_across_periodic_seam() {
        let b = BoundarySpec::Periodic { length: 1.0 };
        let c = Configuration::new(b, vec![0.0, 0.5, 1.0 - 1e-15], 0.0).unwrap();
        let (p, g) = c.project(1e-13);
        assert_eq!(p.len(), 2);
        assert_eq!(g, vec![vec![1, 3]]);
        assert!(p.positions().iter().any(|&x| !(1e-14..=1.0 - 1e-14).contains(&x)));
    }

    #[test]
    fn embed_split_examples() {
        let c = unit(&[0.4]);
        assert!(close(c.embed_split(1).unwrap().positions(), &[0.4, 0.4]));
        assert!(close(c.embed_split(0).unwrap().positions(), &[0.0, 0.4]));
        assert!(close(c.embed_split(2).unwrap().positions(), &[0.4, 1.0]));
        assert!(matches!(c.embed_split(3), Err(ConfigError::SiteOutOfRange { .. })));

        let p = Configuration::new(BoundarySpec::Periodic { length: 1.0 }, vec![0.2, 0.6], 0.0).unwrap();
        assert!(p.embed_split(0).is_err());
        assert!(close(p.embed_split(2).unwrap().positions(), &[0.2, 0.6, 0.6]));
    }

    #[test]
    fn velocity_examples() {
        assert!(close(&unit(&[1.0 / 3.0, 2.0 / 3.0]).velocity(), &[0.0, 0.0]));
        assert!(close(&unit(&[0.25]).velocity(), &[-0.5]));
        assert!(close(&unit(&[0.1, 0.2]).velocity(), &[0.0, -0.7]));
    }

    #[test]
    fn constructor_rejects_invalid_input() {
        let b = BoundarySpec::unit_interval();
        assert!(matches!(Configuration::new(b, vec![0.5, 0.2], 0.0), Err(ConfigError::Unsorted(1))));
        assert!(Configuration::new(b, vec![1.5], 0.0).is_err());
        assert!(Configuration::new(b, vec![0.5], -1.0).is_err());
        let bad = BoundarySpec::FixedEndpoints { left: 1.0, right: 1.0 };
        assert!(Configuration::new(bad, vec![], 0.0).is_err());
        let per = BoundarySpec::Periodic { length: 2.0 };
        assert!(Configuration::new(per, vec![2.0], 0.0).is_err());
        assert!(Configuration::new(BoundarySpec::Periodic { length: 0.0 }, vec![], 0.0).is_err());
    }

    #[test]
    fn json_roundtrip_and_unknown_keys() {
        let c = Configuration::new(BoundarySpec::Periodic { length: 3.0 }, vec![0.5, 2.0], 1.25).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"positions\""));
        let back: Configuration = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let fixed = r#"{"boundary":{"kind":"fixed","left":0,"right":1},"time":0,"positions":[0.2]}"#;
        let c: Configuration = serde_json::from_str(fixed).unwrap();
        assert_eq!(c.len(), 1);
        let extra = r#"{"boundary":{"kind":"fixed","left":0,"right":1},"time":0,"positions":[],"x":1}"#;
        assert!(serde_json::from_str::<Configuration>(extra).is_err());
        let unsorted = r#"{"boundary":{"kind":"fixed","left":0,"right":1},"positions":[0.5,0.1]}"#;
        assert!(serde_json::from_str::<Configuration>(unsorted).is_err());
    }

    fn sorted_interior(max: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..0.999, 0..max).prop_map(|mut v| {
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        })
    }

    proptest! {
        #[test]
        fn project_inverts_embed_split(pos in sorted_interior(12), k in 0usize..20) {
            let c = unit(&pos);
            let k = k % (c.len() + 2);
            let (back, groups) = c.embed_split(k).unwrap().project(0.0);
            prop_assert_eq!(back.positions(), c.positions());
            prop_assert_eq!(groups.len(), 1);
        }

        #[test]
        fn gaps_sum_to_domain_length(pos in sorted_interior(20)) {
            let c = unit(&pos);
            prop_assert!((c.gaps().total() - 1.0).abs() < 1e-12);
            prop_assert!(c.gaps().as_slice().iter().all(|&g| g >= 0.0));
        }

        #[test]
        fn equal_gaps_have_zero_velocity(n in 0usize..40, len in 0.5f64..10.0) {
            let b = BoundarySpec::FixedEndpoints { left: -1.0, right: len };
            let h = (len + 1.0) / (n as f64 + 1.0);
            let pos: Vec<f64> = (1..=n).map(|i| -1.0 + i as f64 * h).collect();
            let c = Configuration::new(b, pos, 0.0).unwrap();
            prop_assert!(c.velocity().iter().all(|v| v.abs() < 1e-12 * (1.0 + len)));
        }

        #[test]
        fn velocities_sum_to_boundary_gap_difference(pos in sorted_interior(20)) {
            // Telescoping: sum_i (y_{i-1} - y_i) = y_first - y_last.
            let c = unit(&pos);
            let g = c.gaps();
            let s: f64 = c.velocity().iter().sum();
            if !pos.is_empty() {
                prop_assert!((s - (g.0[0] - g.0[g.len() - 1])).abs() < 1e-12);
            }
        }
    }
}
