//! Collision search and the piecewise-exact evolution loop.

use super::recorder::{CollisionEvent, Recorder};
use super::spectral::SpectralState;
use super::FlowError;
use crate::config::{gaps_of, project_located, Configuration, MergeTolerance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub tolerance: MergeTolerance,
    /// Cap on bracketing steps per collision search.
    pub max_search_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            tolerance: MergeTolerance::default(),
            max_search_steps: 100_000,
        }
    }
}

/// Largest `s` such that no gap can vanish in `[0, s)`.
///
/// Before the first collision every gap satisfies `y' <= 2y`, so the
/// neighbours of gap `j` stay below `y_{j±1} e^{2s}`, while
/// `y_j' >= -(y_{j-1} + y_{j+1})`. Integrating gives
/// `y_j(s) >= y_j - (y_{j-1} + y_{j+1}) (e^{2s} - 1) / 2`, which stays positive
/// for `s < ln(1 + 2 y_j / (y_{j-1} + y_{j+1})) / 2`. Near a simple root the
/// step lands within `O(y^2)` of it, so the bracket closes quadratically.
pub(crate) fn safe_step(gaps: &[f64], periodic: bool) -> (f64, usize) {
    let m = gaps.len();
    let mut best = (f64::INFINITY, 0);
    if m <= 1 {
        return best;
    }
    for j in 0..m {
        let nb = if periodic {
            gaps[(j + m - 1) % m] + gaps[(j + 1) % m]
        } else {
            let lo = if j > 0 { gaps[j - 1] } else { 0.0 };
            let hi = if j + 1 < m { gaps[j + 1] } else { 0.0 };
            lo + hi
        };
        if nb <= 0.0 {
            continue;
        }
        let s = 0.5 * (2.0 * gaps[j].max(0.0) / nb).ln_1p();
        if s < best.0 {
            best = (s, j);
        }
    }
    best
}

pub(crate) enum Outcome {
    Hit(Hit),
    /// No gap vanishes before the horizon; carries the last bracketing point.
    Clear { t: f64, positions: Vec<f64>, gaps: Vec<f64> },
}

pub(crate) struct Hit {
    /// Offset from the state's reference time.
    pub dt: f64,
    pub positions: Vec<f64>,
    /// Merge threshold to apply at the hit (raised above the default only when
    /// the bracket stalls on round-off).
    pub tol: f64,
}

fn argmin(v: &[f64]) -> Option<(usize, f64)> {
    v.iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Steps forward with [`safe_step`] until some gap falls below `tol`, or the
/// horizon is passed. Every bracketing step is reported to `observe`.
pub(crate) fn search<F>(state: &SpectralState, horizon: f64, tol: f64, max_steps: usize, mut observe: F) -> Outcome
where
    F: FnMut(f64, f64, (&[f64], &[f64]), (&[f64], &[f64])),
{
    let boundary = state.boundary();
    let periodic = boundary.is_periodic();
    let mut t = 0.0;
    let mut pos = state.positions_after(0.0);
    let mut gaps = gaps_of(&pos, boundary);
    let n = state.len();
    if n == 0 || (periodic && n == 1) {
        return Outcome::Clear { t, positions: pos, gaps };
    }
    for _ in 0..max_steps {
        let Some((_, gmin)) = argmin(&gaps) else {
            break;
        };
        if gmin <= tol {
            return Outcome::Hit(Hit { dt: t, positions: pos, tol });
        }
        let (s, _) = safe_step(&gaps, periodic);
        if t + s > horizon {
            return Outcome::Clear { t, positions: pos, gaps };
        }
        let next_t = t + s;
        if next_t <= t {
            // Round-off floor: the gap is as small as it can be resolved.
            return Outcome::Hit(Hit {
                dt: t,
                positions: pos,
                tol: gmin * (1.0 + 1e-9),
            });
        }
        let next_pos = state.positions_after(next_t);
        let next_gaps = gaps_of(&next_pos, boundary);
        observe(t, next_t - t, (&pos, &next_pos), (&gaps, &next_gaps));
        t = next_t;
        pos = next_pos;
        gaps = next_gaps;
    }
    let gmin = argmin(&gaps).map_or(tol, |(_, g)| g);
    Outcome::Hit(Hit {
        dt: t,
        positions: pos,
        tol: gmin.max(tol) * (1.0 + 1e-9),
    })
}

/// First time in `(0, horizon]` at which a gap (boundary cells included)
/// vanishes, with all simultaneously vanishing gaps grouped by site index.
pub fn first_collision(config: &Configuration, horizon: f64) -> Option<(f64, Vec<Vec<usize>>)> {
    first_collision_with(config, horizon, &FlowOptions::default())
}

pub fn first_collision_with(
    config: &Configuration,
    horizon: f64,
    opts: &FlowOptions,
) -> Option<(f64, Vec<Vec<usize>>)> {
    let tol = config.merge_threshold(&opts.tolerance);
    let state = SpectralState::new(config);
    let Outcome::Hit(hit) = search(&state, horizon, tol, opts.max_search_steps, |_, _, _, _| {}) else {
        return None;
    };
    let at = Configuration::from_raw(config.boundary(), hit.positions, config.time() + hit.dt);
    let (_, groups) = project_located(&at, hit.tol);
    Some((hit.dt, groups.into_iter().map(|(g, _)| g).collect()))
}

/// Evolves to `t_end`: exact flow between collisions, projection at each
/// collision, fresh diagonalisation after every merge.
pub fn evolve(config: &Configuration, t_end: f64, recorder: &mut Recorder) -> Result<Configuration, FlowError> {
    evolve_with(config, t_end, recorder, &FlowOptions::default())
}

pub fn evolve_with(
    config: &Configuration,
    t_end: f64,
    recorder: &mut Recorder,
    opts: &FlowOptions,
) -> Result<Configuration, FlowError> {
    evolve_until(config, t_end, None, recorder, opts)
}

/// Like [`evolve_with`], but also stops right after the merge that brings the
/// particle count to `min_count` or below.
pub fn evolve_until(
    config: &Configuration,
    t_end: f64,
    min_count: Option<usize>,
    recorder: &mut Recorder,
    opts: &FlowOptions,
) -> Result<Configuration, FlowError> {
    if !t_end.is_finite() || t_end < config.time() {
        return Err(FlowError::TimeBeforeStart {
            start: config.time(),
            end: t_end,
        });
    }
    let boundary = config.boundary();
    let length = boundary.length();
    let tol = config.merge_threshold(&opts.tolerance);
    recorder.observe_count(config.time(), config.len());

    // Coincident input sites are merged before the flow starts.
    let mut current = merge_at(config.clone(), tol, recorder);
    let reached = |c: &Configuration| min_count.is_some_and(|m| c.len() <= m);
    loop {
        if reached(&current) {
            break;
        }
        let remaining = t_end - current.time();
        if remaining <= 0.0 {
            break;
        }
        if current.is_empty() || (boundary.is_periodic() && current.len() == 1) {
            recorder.occupation.advance_idle(remaining);
            current = current.with_time(t_end);
            break;
        }
        let t0 = current.time();
        let state = SpectralState::new(&current);
        let hit = search(&state, remaining, tol, opts.max_search_steps, |s, dt, pos, gaps| {
            recorder.observe_span(t0 + s, dt, pos, gaps, length, tol);
        });
        match hit {
            Outcome::Clear { t, positions, gaps } => {
                let end_pos = state.positions_after(remaining);
                let end_gaps = gaps_of(&end_pos, boundary);
                recorder.observe_span(t0 + t, remaining - t, (&positions, &end_pos), (&gaps, &end_gaps), length, tol);
                current = Configuration::from_raw(boundary, end_pos, t_end);
                break;
            }
            Outcome::Hit(hit) => {
                let at = Configuration::from_raw(boundary, hit.positions, t0 + hit.dt);
                current = merge_with(at, hit.tol, recorder);
            }
        }
    }
    recorder.observe_count(current.time(), current.len());
    recorder.check_occupation(current.time());
    Ok(current)
}

fn merge_at(config: Configuration, tol: f64, recorder: &mut Recorder) -> Configuration {
    let gaps = config.gaps();
    if gaps.as_slice().iter().any(|&g| g <= tol) {
        merge_with(config, tol, recorder)
    } else {
        config
    }
}

fn merge_with(at: Configuration, tol: f64, recorder: &mut Recorder) -> Configuration {
    let (merged, groups) = project_located(&at, tol);
    if groups.is_empty() {
        return merged;
    }
    let event = CollisionEvent {
        time: at.time(),
        locations: groups.iter().map(|(_, x)| *x).collect(),
        groups: groups.into_iter().map(|(g, _)| g).collect(),
    };
    let removed = event.removed();
    recorder.record_event(event, removed);
    recorder.observe_count(merged.time(), merged.len());
    merged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BoundarySpec;

    fn unit(pos: &[f64]) -> Configuration {
        Configuration::new(BoundarySpec::unit_interval(), pos.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn single_particle_hits_left_endpoint() {
        let (t, groups) = first_collision(&unit(&[0.25]), 10.0).unwrap();
        assert!((t - 0.5 * 2f64.ln()).abs() < 1e-13, "t = {t}");
        assert_eq!(groups, vec![vec![0, 1]]);
    }

    #[test]
    fn equally_spaced_never_collides() {
        assert!(first_collision(&unit(&[0.25, 0.5, 0.75]), 100.0).is_none());
    }

    #[test]
    fn symmetric_pairs() {
        // Both cases move along the antisymmetric sine mode (rate 3):
        // x_1 = 1/3 + (x_1(0) - 1/3) e^{3t}.
        let expect = 2.5f64.ln() / 3.0;

        // Middle cell smallest: the pair meets at 1/2.
        let (t, groups) = first_collision(&unit(&[0.4, 0.6]), 10.0).unwrap();
        assert!((t - expect).abs() < 1e-12);
        assert_eq!(groups, vec![vec![1, 2]]);

        // Middle cell largest: both particles reach the endpoints together.
        let (t, groups) = first_collision(&unit(&[0.2, 0.8]), 10.0).unwrap();
        assert!((t - expect).abs() < 1e-12);
        assert_eq!(groups, vec![vec![0, 1], vec![2, 3]]);
        let mut rec = Recorder::new(BoundarySpec::unit_interval());
        let out = evolve(&unit(&[0.2, 0.8]), 5.0, &mut rec).unwrap();
        assert!(out.is_empty());
        assert_eq!(rec.events.len(), 1);
        assert_eq!(rec.n_removed, 2);
    }

    #[test]
    fn evolve_single_particle_to_empty() {
        let mut rec = Recorder::new(BoundarySpec::unit_interval());
        let out = evolve(&unit(&[0.25]), 1.0, &mut rec).unwrap();
        assert!(out.is_empty());
        assert!((out.time() - 1.0).abs() < 1e-15);
        assert_eq!(rec.events.len(), 1);
        assert!((rec.events[0].time - 0.5 * 2f64.ln()).abs() < 1e-13);
        assert!(rec.violations.is_empty());
        assert!(super::super::recorder::check_gap_growth(&rec));
    }

    #[test]
    fn evolve_to_start_time_is_identity() {
        let c = unit(&[0.1, 0.35, 0.8]);
        let mut rec = Recorder::new(c.boundary());
        let out = evolve(&c, 0.0, &mut rec).unwrap();
        assert_eq!(out, c);
        assert!(evolve(&c.clone().with_time(1.0), 0.5, &mut rec).is_err());
    }

    #[test]
    fn safe_step_is_infinite_without_neighbours() {
        assert!(safe_step(&[1.0], false).0.is_infinite());
        let (s, j) = safe_step(&[0.25, 0.75], false);
        assert_eq!(j, 0);
        assert!(s < 0.5 * 2f64.ln());
    }
}
