//! Event-driven evolution of long periodic chains by local Taylor expansion.
//!
//! Over a step of length `h` gap `k` feels gap `k + d` only at order
//! `h^d / d!`. Each step expands every gap in its Taylor polynomial, rules out
//! collisions with a coefficient bound, and re-solves a window reaching
//! `radius` gaps past every remaining candidate, with the two gaps just
//! outside the window as prescribed drivers. With the defaults the neglected
//! coupling and truncation are below `1e-17` of the largest gap.
//!
//! Internal labelling: particle `p` sits between gap `p` (left) and gap
//! `p + 1` (right), so gap `k = x_k - x_{k-1}` and gap `0` wraps around.
//! Deleting gap `k` removes particle `k`. Event groups are reported as sites
//! `1..=n` in this ring order, which starts at an arbitrary particle.

use super::evolve::{evolve_until, FlowOptions};
use super::recorder::{CollisionEvent, Recorder};
use super::FlowError;
use crate::config::{BoundarySpec, Configuration, MergeTolerance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub step: f64,
    pub order: usize,
    pub radius: usize,
    /// Below this many particles the spectral engine takes over.
    pub fallback_below: usize,
    pub tolerance: MergeTolerance,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions {
            step: 1.0 / 256.0,
            order: 8,
            radius: 6,
            fallback_below: 512,
            tolerance: MergeTolerance::default(),
        }
    }
}

/// Taylor shift: coefficients of `p(u + s)` in powers of `s`.
fn shift(c: &[f64], u: f64) -> Vec<f64> {
    let mut q = c.to_vec();
    if u == 0.0 {
        return q;
    }
    let m = q.len();
    for i in 0..m {
        for j in (i..m - 1).rev() {
            q[j] += u * q[j + 1];
        }
    }
    q
}

fn horner(c: &[f64], s: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &x| acc * s + x)
}

/// Sum of `|c_m| s^m` for `m >= 1`.
fn tail_bound(c: &[f64], s: f64) -> f64 {
    let mut acc = 0.0;
    let mut p = 1.0;
    for &x in &c[1..] {
        p *= s;
        acc += x.abs() * p;
    }
    acc
}

/// Earliest `u` in `[0, span]` with `p(u) <= tol`, stepping with the largest
/// move a quadratic lower bound allows. Quadratic convergence at simple roots.
fn earliest_root(c: &[f64], span: f64, tol: f64, slack: f64) -> Option<f64> {
    if c[0] - tail_bound(c, span) - slack > tol {
        return None;
    }
    let mut u = 0.0;
    for _ in 0..200 {
        let q = shift(c, u);
        if q[0] <= tol {
            return Some(u);
        }
        let rest = span - u;
        if rest <= 0.0 || q[0] - tail_bound(&q, rest) - slack > tol {
            return None;
        }
        // |p''| <= b on [u, span].
        let mut b = 0.0;
        let mut p = 1.0;
        for (m, &x) in q.iter().enumerate().skip(2) {
            b += (m * (m - 1)) as f64 * x.abs() * p;
            p *= rest;
        }
        let v = q[0] - tol;
        let s = if b > 0.0 {
            (q[1] + (q[1] * q[1] + 2.0 * b * v).sqrt()) / b
        } else if q[1] < 0.0 {
            v / -q[1]
        } else {
            return None;
        };
        if s <= 0.0 || u + s <= u {
            return Some(u);
        }
        u += s;
        if u > span {
            return None;
        }
    }
    Some(u)
}

/// `y_max (4h)^{M+1} / (M+1)! e^{4h}` bounds the truncated tail.
fn remainder(ymax: f64, h: f64, order: usize) -> f64 {
    let mut r = ymax * (4.0 * h).exp();
    for m in 1..=order + 1 {
        r *= 4.0 * h / m as f64;
    }
    r + 4.0 * f64::EPSILON * ymax
}

struct StepEvent {
    time: f64,
    /// Original particle indices (step-start labels), one list per group.
    groups: Vec<Vec<usize>>,
    locations: Vec<f64>,
}

struct Window {
    start: usize,
    len: usize,
}

enum WindowOutcome {
    Done(WindowResult),
    /// An event landed within the radius of the edge; cover this gap too.
    Expand(usize),
}

struct WindowResult {
    gaps: Vec<f64>,
    gap_idx: Vec<usize>,
    pos: Vec<f64>,
    part_idx: Vec<usize>,
    events: Vec<StepEvent>,
    recorder: Recorder,
}

struct StepPlan {
    h: f64,
    gaps: Vec<f64>,
    pos: Vec<f64>,
    keep: Vec<bool>,
    events: Vec<StepEvent>,
    scratch: Recorder,
}

/// Periodic chain advanced by local Taylor steps.
#[derive(Debug, Clone)]
pub struct LocalEngine {
    length: f64,
    time: f64,
    gaps: Vec<f64>,
    pos: Vec<f64>,
    opts: LocalOptions,
    /// Set once the count drops below the fallback size.
    small: Option<Configuration>,
}

impl LocalEngine {
    pub fn new(config: &Configuration, opts: LocalOptions) -> Result<Self, FlowError> {
        let BoundarySpec::Periodic { length } = config.boundary() else {
            return Err(FlowError::Unsupported("the local engine needs a periodic boundary"));
        };
        let x = config.positions();
        let n = x.len();
        let mut gaps = Vec::with_capacity(n);
        if n > 0 {
            gaps.push(x[0] + length - x[n - 1]);
            gaps.extend(x.windows(2).map(|w| w[1] - w[0]));
        }
        let mut engine = LocalEngine {
            length,
            time: config.time(),
            gaps,
            pos: x.to_vec(),
            opts,
            small: None,
        };
        if n < opts.fallback_below {
            engine.small = Some(config.clone());
        }
        Ok(engine)
    }

    pub fn time(&self) -> f64 {
        match &self.small {
            Some(c) => c.time(),
            None => self.time,
        }
    }

    pub fn len(&self) -> usize {
        match &self.small {
            Some(c) => c.len(),
            None => self.gaps.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn boundary(&self) -> BoundarySpec {
        BoundarySpec::Periodic { length: self.length }
    }

    fn tol(&self) -> f64 {
        self.opts.tolerance.threshold(self.length)
    }

    pub fn configuration(&self) -> Configuration {
        if let Some(c) = &self.small {
            return c.clone();
        }
        let n = self.gaps.len();
        let mut x = Vec::with_capacity(n);
        if n > 0 {
            let mut acc = self.pos[0];
            x.push(acc);
            for &g in &self.gaps[1..] {
                acc += g;
                x.push(acc);
            }
        }
        Configuration::from_raw(self.boundary(), x, self.time)
    }

    /// Gaps in ring order.
    pub fn gaps(&self) -> Vec<f64> {
        match &self.small {
            Some(c) => c.gaps().into_inner(),
            None => self.gaps.clone(),
        }
    }

    /// Advances to `t_end`, or until the count first drops to `min_count`.
    pub fn advance_until(
        &mut self,
        t_end: f64,
        min_count: Option<usize>,
        recorder: &mut Recorder,
    ) -> Result<(), FlowError> {
        if !t_end.is_finite() || t_end < self.time() {
            return Err(FlowError::TimeBeforeStart {
                start: self.time(),
                end: t_end,
            });
        }
        let reached = |n: usize| min_count.is_some_and(|m| n <= m);
        loop {
            if let Some(c) = &self.small {
                let flow = FlowOptions {
                    tolerance: self.opts.tolerance,
                    ..FlowOptions::default()
                };
                let next = evolve_until(c, t_end, min_count, recorder, &flow)?;
                self.small = Some(next);
                return Ok(());
            }
            let n = self.gaps.len();
            if reached(n) || self.time >= t_end {
                recorder.check_occupation(self.time);
                return Ok(());
            }
            if n < self.opts.fallback_below {
                self.small = Some(self.configuration());
                continue;
            }
            let h = self.opts.step.min(t_end - self.time);
            let Some(mut plan) = self.plan(h) else {
                self.whole_step(h, min_count, recorder)?;
                continue;
            };
            if let Some(m) = min_count {
                if let Some(cut) = cut_for_count(&plan, self.time, n, m) {
                    match self.plan(cut) {
                        Some(p) => plan = p,
                        None => {
                            self.whole_step(cut, min_count, recorder)?;
                            continue;
                        }
                    }
                }
            }
            self.commit(plan, recorder);
        }
    }

    /// Computes one step of length `h` without touching the state. `None`
    /// when the windows would wrap all the way around the ring.
    fn plan(&self, h: f64) -> Option<StepPlan> {
        let n = self.gaps.len();
        let order = self.opts.order;
        let radius = self.opts.radius;
        let tol = self.tol();
        let ymax = self.gaps.iter().copied().fold(0.0, f64::max);
        let slack = remainder(ymax, h, order);

        // coeffs[m][k]: m-th Taylor coefficient of gap k.
        let mut coeffs = vec![self.gaps.clone()];
        for m in 0..order {
            let prev = &coeffs[m];
            let inv = 1.0 / (m + 1) as f64;
            let next: Vec<f64> = (0..n)
                .map(|k| {
                    let l = prev[(k + n - 1) % n];
                    let r = prev[(k + 1) % n];
                    (2.0 * prev[k] - l - r) * inv
                })
                .collect();
            coeffs.push(next);
        }
        let gap_poly = |k: usize| -> Vec<f64> { coeffs.iter().map(|c| c[k]).collect() };

        let mut covered = vec![false; n];
        let cover = |covered: &mut Vec<bool>, k: usize| {
            for d in 0..=2 * radius {
                covered[(k + n + d - radius) % n] = true;
            }
        };
        let mut hp = vec![1.0; order + 1];
        for m in 1..=order {
            hp[m] = hp[m - 1] * h;
        }
        for k in 0..n {
            let mut tail = 0.0;
            for m in 1..=order {
                tail += coeffs[m][k].abs() * hp[m];
            }
            if coeffs[0][k] - tail - slack <= tol {
                cover(&mut covered, k);
            }
        }

        let results = loop {
            let windows = windows_of(&covered)?;
            let mut out = Vec::with_capacity(windows.len());
            let mut expand = Vec::new();
            for w in &windows {
                match self.solve_window(w, h, &gap_poly, slack) {
                    WindowOutcome::Done(r) => out.push((w.start, w.len, r)),
                    WindowOutcome::Expand(k) => expand.push(k),
                }
            }
            if expand.is_empty() {
                break out;
            }
            for k in expand {
                cover(&mut covered, k);
            }
        };

        let mut gaps: Vec<f64> = (0..n)
            .map(|k| if covered[k] { 0.0 } else { horner(&gap_poly(k), h) })
            .collect();
        let mut pos = self.pos.clone();
        let mut scratch = Recorder::counting(self.boundary());
        let growth = (2.0 * h).exp();
        for k in 0..n {
            if !covered[k] && !scratch.gap_growth.check(growth, self.gaps[k], gaps[k], tol) {
                scratch.violation(self.time, "gap_growth", format!("gap {k} grew faster than e^(2t)"));
            }
        }
        scratch.gap_growth.spans += 1;
        // Particles outside every window move with their global polynomial.
        let mut in_window = vec![false; n];
        for (start, len, _) in &results {
            for j in 0..len - 1 {
                in_window[(start + j) % n] = true;
            }
        }
        for p in 0..n {
            if in_window[p] {
                continue;
            }
            let mut dx = 0.0;
            for m in 0..order {
                dx += (coeffs[m][p] - coeffs[m][(p + 1) % n]) / (m + 1) as f64 * hp[m + 1];
            }
            let x = pos[p] + dx;
            scratch.occupation.record_move(pos[p], x);
            pos[p] = x;
        }

        let mut keep = vec![true; n];
        let mut events = Vec::new();
        for (start, len, r) in results {
            // Deleted gaps and particles share indices, and the last gap of a
            // window always survives.
            for j in 0..len {
                keep[(start + j) % n] = false;
            }
            for (g, &k) in r.gaps.iter().zip(&r.gap_idx) {
                gaps[k] = *g;
                keep[k] = true;
            }
            for (x, &p) in r.pos.iter().zip(&r.part_idx) {
                pos[p] = *x;
            }
            scratch.merge(&r.recorder);
            events.extend(r.events);
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Some(StepPlan {
            h,
            gaps,
            pos,
            keep,
            events,
            scratch,
        })
    }

    fn solve_window<F>(&self, w: &Window, h: f64, gap_poly: &F, slack: f64) -> WindowOutcome
    where
        F: Fn(usize) -> Vec<f64>,
    {
        let n = self.gaps.len();
        let order = self.opts.order;
        let radius = self.opts.radius;
        let tol = self.tol();
        let idx = |j: usize| (w.start + j) % n;
        let mut gaps: Vec<f64> = (0..w.len).map(|j| self.gaps[idx(j)]).collect();
        let mut gap_idx: Vec<usize> = (0..w.len).map(idx).collect();
        let mut pos: Vec<f64> = (0..w.len - 1).map(|j| self.pos[idx(j)]).collect();
        let mut part_idx: Vec<usize> = (0..w.len - 1).map(idx).collect();
        let left = gap_poly((w.start + n - 1) % n);
        let right = gap_poly((w.start + w.len) % n);
        let mut events = Vec::new();
        let mut s0 = 0.0;
        let mut local = Recorder::counting(self.boundary());

        while s0 < h {
            let span = h - s0;
            let dl = shift(&left, s0);
            let dr = shift(&right, s0);
            let m_gaps = gaps.len();
            let mut c = vec![gaps.clone()];
            for m in 0..order {
                let prev = &c[m];
                let inv = 1.0 / (m + 1) as f64;
                let next: Vec<f64> = (0..m_gaps)
                    .map(|i| {
                        let l = if i == 0 { dl[m] } else { prev[i - 1] };
                        let r = if i + 1 == m_gaps { dr[m] } else { prev[i + 1] };
                        (2.0 * prev[i] - l - r) * inv
                    })
                    .collect();
                c.push(next);
            }
            let poly = |i: usize| -> Vec<f64> { c.iter().map(|v| v[i]).collect() };
            let mut hit: Option<f64> = None;
            for i in 0..m_gaps {
                if let Some(u) = earliest_root(&poly(i), span, tol, slack) {
                    hit = Some(hit.map_or(u, |v: f64| v.min(u)));
                }
            }
            let u = hit.unwrap_or(span);
            let growth = (2.0 * u).exp();
            let new_gaps: Vec<f64> = (0..m_gaps).map(|i| horner(&poly(i), u)).collect();
            for i in 0..m_gaps {
                if !local.gap_growth.check(growth, gaps[i], new_gaps[i], tol) {
                    local.violation(self.time + s0, "gap_growth", format!("gap {} grew faster than e^(2t)", gap_idx[i]));
                }
            }
            for (j, x) in pos.iter_mut().enumerate() {
                let mut dx = 0.0;
                let mut up = 1.0;
                for m in 0..order {
                    up *= u;
                    dx += (c[m][j] - c[m][j + 1]) / (m + 1) as f64 * up;
                }
                local.occupation.record_move(*x, *x + dx);
                *x += dx;
            }
            gaps = new_gaps;
            s0 += u;
            if hit.is_none() {
                break;
            }

            // Merge every vanished gap; consecutive ones form one group.
            let mut groups = Vec::new();
            let mut locations = Vec::new();
            let mut i = 0;
            let mut runs = Vec::new();
            while i < gaps.len() {
                if gaps[i] <= tol {
                    let a = i;
                    while i < gaps.len() && gaps[i] <= tol {
                        i += 1;
                    }
                    runs.push((a, i - 1));
                } else {
                    i += 1;
                }
            }
            if runs.is_empty() {
                // The root was accepted on a value within round-off of `tol`.
                let i = (0..gaps.len()).min_by(|&a, &b| gaps[a].total_cmp(&gaps[b])).unwrap_or(0);
                runs.push((i, i));
            }
            for &(a, b) in &runs {
                if a < radius || b + radius >= gaps.len() {
                    return WindowOutcome::Expand(gap_idx[if a < radius { a } else { b }]);
                }
            }
            for &(a, b) in runs.iter().rev() {
                let eps: f64 = gaps[a..=b].iter().sum();
                let xs = &pos[a - 1..=b];
                let loc = xs.iter().sum::<f64>() / xs.len() as f64;
                groups.push(part_idx[a - 1..=b].to_vec());
                locations.push(loc);
                gaps.drain(a..=b);
                gap_idx.drain(a..=b);
                pos.drain(a..=b);
                part_idx.drain(a..=b);
                pos[a - 1] = loc;
                gaps[a - 1] += 0.5 * eps;
                gaps[a] += 0.5 * eps;
            }
            groups.reverse();
            locations.reverse();
            events.push(StepEvent {
                time: self.time + s0,
                groups,
                locations,
            });
        }
        WindowOutcome::Done(WindowResult {
            gaps,
            gap_idx,
            pos,
            part_idx,
            events,
            recorder: local,
        })
    }

    /// Whole-ring step through the spectral engine, used when the windows
    /// would wrap all the way around. The ring is relabelled afterwards.
    fn whole_step(&mut self, h: f64, min_count: Option<usize>, recorder: &mut Recorder) -> Result<(), FlowError> {
        let flow = FlowOptions {
            tolerance: self.opts.tolerance,
            ..FlowOptions::default()
        };
        let next = evolve_until(&self.configuration(), self.time + h, min_count, recorder, &flow)?;
        *self = LocalEngine::new(&next, self.opts)?;
        if self.small.is_none() && self.gaps.len() < self.opts.fallback_below {
            self.small = Some(next);
        }
        Ok(())
    }

    fn commit(&mut self, plan: StepPlan, recorder: &mut Recorder) {
        let n = self.gaps.len();
        let mut removed = Fenwick::new(n);
        let mut count = n;
        for ev in &plan.events {
            let mut groups = Vec::with_capacity(ev.groups.len());
            let mut gone = Vec::new();
            for g in &ev.groups {
                let mut sites: Vec<usize> = g.iter().map(|&p| p - removed.prefix(p) + 1).collect();
                sites.sort_unstable();
                groups.push(sites);
                gone.extend_from_slice(&g[1..]);
            }
            for p in gone {
                removed.add(p);
                count -= 1;
            }
            let event = CollisionEvent {
                time: ev.time,
                groups,
                locations: ev.locations.iter().map(|&x| x.rem_euclid(self.length)).collect(),
            };
            let k = event.removed();
            recorder.record_event(event, k);
            recorder.observe_count(ev.time, count);
        }
        let StepPlan {
            h,
            gaps,
            pos,
            keep,
            scratch,
            ..
        } = plan;
        self.gaps = gaps.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(g, _)| g).collect();
        self.pos = pos.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| x).collect();
        self.time += h;
        recorder.merge(&scratch);
        recorder.occupation.advance_idle(h);
        let total: f64 = self.gaps.iter().sum();
        if !self.gaps.is_empty() {
            recorder.observe_length(self.time, total, self.length);
        }
    }
}

/// Step length that stops right after the event bringing the count to
/// `target`: halfway to the next event, or to the end of the step.
fn cut_for_count(plan: &StepPlan, start: f64, n: usize, target: usize) -> Option<f64> {
    let mut count = n;
    for (i, ev) in plan.events.iter().enumerate() {
        count -= ev.groups.iter().map(|g| g.len() - 1).sum::<usize>();
        if count <= target {
            let next = plan.events.get(i + 1).map_or(start + plan.h, |e| e.time);
            let cut = 0.5 * (ev.time + next) - start;
            return (cut < plan.h).then_some(cut);
        }
    }
    None
}

/// Counts removed particles by step-start label.
struct Fenwick(Vec<usize>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of marked labels below `i`.
    fn prefix(&self, i: usize) -> usize {
        let mut i = i;
        let mut acc = 0;
        while i > 0 {
            acc += self.0[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
}

/// Maximal runs of covered gaps, each flanked by uncovered driver gaps.
/// `None` when fewer than two gaps are uncovered.
fn windows_of(covered: &[bool]) -> Option<Vec<Window>> {
    let n = covered.len();
    let free = covered.iter().position(|c| !c)?;
    if covered.iter().filter(|c| !**c).count() < 2 {
        return None;
    }
    let mut out = Vec::new();
    let mut j = 1;
    while j < n {
        let k = (free + j) % n;
        if covered[k] {
            let start = k;
            let mut len = 0;
            while j < n && covered[(free + j) % n] {
                len += 1;
                j += 1;
            }
            out.push(Window { start, len });
        } else {
            j += 1;
        }
    }
    Some(out)
}
