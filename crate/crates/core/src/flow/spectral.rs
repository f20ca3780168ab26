//! Exact propagation of `x' = A x` between collisions.
//!
//! On interior rows `A` is the negated discrete Laplacian. With fixed
//! endpoints the positions split into the linear interpolation between the
//! endpoints plus a Dirichlet part expanded in `sin(i k pi / (n + 1))`, each
//! mode growing at `lambda_k = 2 - 2 cos(k pi / (n + 1))`. On the circle the
//! positions split into their mean, a ramp of slope `L / n` and a periodic part
//! expanded in Fourier modes with `lambda_k = 2 - 2 cos(2 pi k / n)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::transform;
use super::FlowError;
use crate::config::{BoundarySpec, Configuration};

#[derive(Debug, Clone)]
pub enum ModalCoeffs {
    Sine(Vec<f64>),
    Fourier(Vec<Complex64>),
}

/// Diagonalised form of a configuration: `x = affine + sum_k c_k e^{lambda_k s} phi_k`
/// where `s` is measured from [`SpectralState::time`].
#[derive(Debug, Clone)]
pub struct SpectralState {
    boundary: BoundarySpec,
    time: f64,
    affine: Vec<f64>,
    coeffs: ModalCoeffs,
    rates: Vec<f64>,
}

pub fn fixed_rates(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|k| 2.0 - 2.0 * (k as f64 * PI / (n + 1) as f64).cos())
        .collect()
}

pub fn periodic_rates(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 2.0 - 2.0 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

impl SpectralState {
    pub fn new(config: &Configuration) -> Self {
        Self::from_positions(config.boundary(), config.positions(), config.time())
    }

    /// `positions` must be ascending; on the circle they may be unwrapped as
    /// long as they span less than one period.
    pub fn from_positions(boundary: BoundarySpec, positions: &[f64], time: f64) -> Self {
        let n = positions.len();
        match boundary {
            BoundarySpec::FixedEndpoints { left, right } => {
                let h = (right - left) / (n + 1) as f64;
                let affine: Vec<f64> = (1..=n).map(|i| left + i as f64 * h).collect();
                let u: Vec<f64> = positions.iter().zip(&affine).map(|(x, a)| x - a).collect();
                let scale = 2.0 / (n + 1) as f64;
                let coeffs = transform::dst1(&u).into_iter().map(|s| s * scale).collect();
                SpectralState {
                    boundary,
                    time,
                    affine,
                    coeffs: ModalCoeffs::Sine(coeffs),
                    rates: fixed_rates(n),
                }
            }
            BoundarySpec::Periodic { length } => {
                let mean = if n == 0 {
                    0.0
                } else {
                    positions.iter().sum::<f64>() / n as f64
                };
                let h = length / n.max(1) as f64;
                let mid = (n as f64 - 1.0) / 2.0;
                let affine: Vec<f64> = (0..n).map(|j| mean + (j as f64 - mid) * h).collect();
                let u: Vec<f64> = positions.iter().zip(&affine).map(|(x, a)| x - a).collect();
                SpectralState {
                    boundary,
                    time,
                    affine,
                    coeffs: ModalCoeffs::Fourier(transform::dft(&u)),
                    rates: periodic_rates(n),
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.affine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.affine.is_empty()
    }

    pub fn boundary(&self) -> BoundarySpec {
        self.boundary
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn affine(&self) -> &[f64] {
        &self.affine
    }

    pub fn coeffs(&self) -> &ModalCoeffs {
        &self.coeffs
    }

    /// Positions (unwrapped on the circle) after flowing for `ds`, which may
    /// be negative for the backward flow.
    pub fn positions_after(&self, ds: f64) -> Vec<f64> {
        let u = match &self.coeffs {
            ModalCoeffs::Sine(c) => {
                let scaled: Vec<f64> = c
                    .iter()
                    .zip(&self.rates)
                    .map(|(ck, lk)| ck * (lk * ds).exp())
                    .collect();
                transform::dst1(&scaled)
            }
            ModalCoeffs::Fourier(c) => {
                let scaled: Vec<Complex64> = c
                    .iter()
                    .zip(&self.rates)
                    .map(|(ck, lk)| ck * (lk * ds).exp())
                    .collect();
                transform::idft_real(&scaled)
            }
        };
        u.iter().zip(&self.affine).map(|(ui, a)| ui + a).collect()
    }

    /// Re-bases the modal coefficients at `time + ds`.
    pub fn advance(&mut self, ds: f64) {
        match &mut self.coeffs {
            ModalCoeffs::Sine(c) => {
                for (ck, lk) in c.iter_mut().zip(&self.rates) {
                    *ck *= (lk * ds).exp();
                }
            }
            ModalCoeffs::Fourier(c) => {
                for (ck, lk) in c.iter_mut().zip(&self.rates) {
                    *ck *= (lk * ds).exp();
                }
            }
        }
        self.time += ds;
    }

    pub fn configuration_after(&self, ds: f64) -> Configuration {
        Configuration::from_raw(self.boundary, self.positions_after(ds), self.time + ds)
    }
}

/// `e^{dt A} x`; the caller guarantees that no collision happens in `(0, dt)`.
pub fn propagate_exact(config: &Configuration, dt: f64) -> Result<Configuration, FlowError> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(FlowError::NegativeTime(dt));
    }
    if dt == 0.0 || config.is_empty() {
        return Ok(config.clone().with_time(config.time() + dt));
    }
    Ok(SpectralState::new(config).configuration_after(dt))
}

/// `e^{-dt A} x`. The backward flow maps the closed simplex into its interior,
/// so the result has strictly positive gaps for `dt > 0`. Model time is
/// decreased by `dt` (clamped at zero).
pub fn propagate_backward(config: &Configuration, dt: f64) -> Result<Configuration, FlowError> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(FlowError::NegativeTime(dt));
    }
    let t = (config.time() - dt).max(0.0);
    if dt == 0.0 || config.is_empty() {
        return Ok(config.clone().with_time(t));
    }
    let state = SpectralState::new(config);
    Ok(Configuration::from_raw(config.boundary(), state.positions_after(-dt), t))
}

/// Jacobian determinant of `e^{dt A_n}` restricted to the `n` interior
/// coordinates, as the product of the modal growth factors.
pub fn propagator_volume(n: usize, dt: f64) -> f64 {
    fixed_rates(n).iter().map(|l| (l * dt).exp()).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BoundarySpec;

    fn unit(pos: &[f64]) -> Configuration {
        Configuration::new(BoundarySpec::unit_interval(), pos.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn reconstruction_matches_input() {
        for n in [1usize, 2, 7, 64, 65, 200] {
            let pos: Vec<f64> = (1..=n).map(|i| (i as f64 / (n + 1) as f64).powf(1.3)).collect();
            let s = SpectralState::new(&unit(&pos));
            for (a, b) in s.positions_after(0.0).iter().zip(&pos) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(s.rates().iter().all(|&l| (0.0..=4.0).contains(&l)));
        }
        let per = Configuration::new(BoundarySpec::Periodic { length: 5.0 }, vec![0.1, 0.3, 2.0, 4.9], 0.0).unwrap();
        let s = SpectralState::new(&per);
        for (a, b) in s.positions_after(0.0).iter().zip(per.positions()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_particle_closed_form() {
        let c = unit(&[0.25]);
        let out = propagate_exact(&c, 0.2).unwrap();
        let expect = 0.5 - 0.25 * (0.4f64).exp();
        assert!((out.positions()[0] - expect).abs() < 1e-14);
        assert!((out.positions()[0] - 0.12704).abs() < 1e-5);
        assert!((out.time() - 0.2).abs() < 1e-15);

        let mid = propagate_exact(&unit(&[0.5]), 3.0).unwrap();
        assert!((mid.positions()[0] - 0.5).abs() < 1e-14);

        let back = propagate_backward(&c, 0.5 * 2f64.ln()).unwrap();
        assert!((back.positions()[0] - 0.375).abs() < 1e-14);
    }

    #[test]
    fn equally_spaced_is_fixed_point() {
        let c = unit(&[0.25, 0.5, 0.75]);
        let out = propagate_exact(&c, 1.7).unwrap();
        for (a, b) in out.positions().iter().zip(c.positions()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_splits_a_double_point_symmetrically() {
        let c = unit(&[0.5, 0.5]);
        let out = propagate_backward(&c, 0.1).unwrap();
        let p = out.positions();
        assert!(p[0] < p[1]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-14);
        // The antisymmetric part is the k = 2 sine mode with rate 3.
        let expect = 1.0 / 3.0 + (1.0 / 6.0) * (-0.3f64).exp();
        assert!((p[0] - expect).abs() < 1e-13);
    }

    #[test]
    fn negative_dt_is_rejected() {
        assert!(matches!(propagate_exact(&unit(&[0.3]), -0.1), Err(FlowError::NegativeTime(_))));
    }

    #[test]
    fn volume_examples() {
        assert!((propagator_volume(3, 0.1) - 0.6f64.exp()).abs() < 1e-12);
        assert!((propagator_volume(3, 0.1) - 1.822_118_8).abs() < 1e-6);
        assert_eq!(propagator_volume(5, 0.0), 1.0);
        let v = propagator_volume(8, 0.25);
        assert!((v / 4f64.exp() - 1.0).abs() < 1e-10);
        assert!((v - 54.598_15).abs() < 1e-4);
    }

    #[test]
    fn periodic_mean_is_conserved() {
        let per = Configuration::new(BoundarySpec::Periodic { length: 3.0 }, vec![0.2, 0.9, 1.1, 2.5], 0.0).unwrap();
        let s = SpectralState::new(&per);
        let p0: f64 = s.positions_after(0.0).iter().sum();
        let p1: f64 = s.positions_after(0.05).iter().sum();
        assert!((p0 - p1).abs() < 1e-12);
    }
}
