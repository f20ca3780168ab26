//! Adaptive Dormand-Prince 5(4) integration of the same dynamics, kept as an
//! independent backend for cross-checks of the spectral engine.

use crate::config::{gaps_of, velocity_of, BoundarySpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperOptions {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for StepperOptions {
    fn default() -> Self {
        StepperOptions {
            rtol: 1e-13,
            atol: 1e-15,
            initial_step: 1e-3,
            max_steps: 1_000_000,
        }
    }
}

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince step; returns the new state and the embedded error
/// estimate.
fn dp_step(x: &[f64], h: f64, boundary: BoundarySpec) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for s in 0..7 {
        let mut y = x.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = A[s][j];
            if a != 0.0 {
                for i in 0..n {
                    y[i] += h * a * kj[i];
                }
            }
        }
        k.push(velocity_of(&y, boundary));
    }
    let mut out = x.to_vec();
    let mut err = vec![0.0; n];
    for s in 0..7 {
        for i in 0..n {
            out[i] += h * B5[s] * k[s][i];
            err[i] += h * (B5[s] - B4[s]) * k[s][i];
        }
    }
    (out, err)
}

fn error_norm(x: &[f64], y: &[f64], err: &[f64], opts: &StepperOptions) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x
        .iter()
        .zip(y)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / x.len() as f64).sqrt()
}

/// Adaptive integrator state.
#[derive(Debug, Clone)]
pub struct Stepper {
    boundary: BoundarySpec,
    opts: StepperOptions,
    x: Vec<f64>,
    t: f64,
    h: f64,
    pub accepted: usize,
    pub rejected: usize,
}

impl Stepper {
    pub fn new(boundary: BoundarySpec, x: &[f64], opts: StepperOptions) -> Self {
        Stepper {
            boundary,
            opts,
            x: x.to_vec(),
            t: 0.0,
            h: opts.initial_step,
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Attempts one step of at most `limit`; returns the step taken.
    fn try_step(&mut self, limit: f64) -> f64 {
        loop {
            let h = self.h.min(limit);
            let (y, err) = dp_step(&self.x, h, self.boundary);
            let e = error_norm(&self.x, &y, &err, &self.opts);
            let fac = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
            if e <= 1.0 {
                self.x = y;
                self.t += h;
                self.accepted += 1;
                if h == self.h || fac < 1.0 {
                    self.h *= fac;
                }
                return h;
            }
            self.rejected += 1;
            self.h = h * fac;
        }
    }

    /// Integrates the linear flow (no collision handling) to `t_end`.
    pub fn advance_to(&mut self, t_end: f64) {
        let mut guard = 0;
        while self.t < t_end && guard < self.opts.max_steps {
            self.try_step(t_end - self.t);
            guard += 1;
        }
    }

    /// Integrates until some gap drops to `tol` or below, or `horizon`.
    /// The crossing is bracketed between accepted steps and then bisected
    /// with single steps from the bracket start.
    pub fn advance_to_collision(&mut self, horizon: f64, tol: f64) -> Option<f64> {
        let min_gap = |x: &[f64], b| gaps_of(x, b).into_iter().fold(f64::INFINITY, f64::min);
        if min_gap(&self.x, self.boundary) <= tol {
            return Some(self.t);
        }
        let mut guard = 0;
        while self.t < horizon && guard < self.opts.max_steps {
            guard += 1;
            let (x0, t0) = (self.x.clone(), self.t);
            let h = self.try_step(horizon - self.t);
            if min_gap(&self.x, self.boundary) > tol {
                continue;
            }
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let (y, _) = dp_step(&x0, mid, self.boundary);
                if min_gap(&y, self.boundary) > tol {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            self.x = dp_step(&x0, hi, self.boundary).0;
            self.t = t0 + hi;
            return Some(self.t);
        }
        None
    }
}

/// Positions after flowing `dt` with the adaptive integrator (no collisions).
pub fn integrate(boundary: BoundarySpec, x: &[f64], dt: f64, opts: StepperOptions) -> Vec<f64> {
    let mut s = Stepper::new(boundary, x, opts);
    s.advance_to(dt);
    s.x
}

/// Determinant of the time-`dt` flow map of `n` interior particles on the
/// unit interval, by central differences of the integrated flow around the
/// equally spaced state. The flow is affine, so wide differences lose
/// nothing to truncation.
pub fn flow_map_determinant(n: usize, dt: f64, opts: StepperOptions) -> f64 {
    let boundary = BoundarySpec::unit_interval();
    let base: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    let eps = 0.5;
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut p = base.clone();
        let mut m = base.clone();
        p[j] += eps;
        m[j] -= eps;
        let fp = integrate(boundary, &p, dt, opts);
        let fm = integrate(boundary, &m, dt, opts);
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    determinant(jac)
}

/// Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap_or(c);
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_particle_matches_closed_form() {
        let x = integrate(BoundarySpec::unit_interval(), &[0.25], 0.2, StepperOptions::default());
        let expect = 0.5 - 0.25 * 0.4f64.exp();
        assert!((x[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn collision_time_of_single_particle() {
        let mut s = Stepper::new(BoundarySpec::unit_interval(), &[0.25], StepperOptions::default());
        let t = s.advance_to_collision(10.0, 1e-13).unwrap();
        assert!((t - 0.5 * 2f64.ln()).abs() < 1e-11, "{t}");
    }

    #[test]
    fn determinant_of_small_matrices() {
        assert!((determinant(vec![vec![2.0, 1.0], vec![1.0, 3.0]]) - 5.0).abs() < 1e-14);
        assert!((determinant(vec![vec![0.0, 1.0], vec![1.0, 0.0]]) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn flow_map_determinant_is_exponential_of_trace() {
        for n in 1..=4 {
            let d = flow_map_determinant(n, 0.1, StepperOptions::default());
            let expect = (0.2 * n as f64).exp();
            assert!((d - expect).abs() < 1e-8, "n={n}: {d} vs {expect}");
        }
    }
}
