//! Sine and Fourier transforms used to diagonalise the second-difference
//! operator. Small sizes use the direct sums; larger sizes go through FFTs.

use std::cell::RefCell;
use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Sizes above this use the FFT path.
pub const DIRECT_MAX: usize = 64;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// `S_k = sum_{i=1}^{n} u_i sin(pi i k / (n + 1))` for `k = 1..=n`
/// (`u[0]` holds `u_1`).
pub fn dst1(u: &[f64]) -> Vec<f64> {
    if u.len() <= DIRECT_MAX {
        dst1_direct(u)
    } else {
        dst1_fft(u)
    }
}

pub fn dst1_direct(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let period = 2 * (n + 1);
    let table: Vec<f64> = (0..period).map(|m| (PI * m as f64 / (n + 1) as f64).sin()).collect();
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let k = k + 1;
        let mut idx = 0usize;
        let mut acc = 0.0;
        for &ui in u {
            idx += k;
            if idx >= period {
                idx -= period;
            }
            acc += ui * table[idx];
        }
        *o = acc;
    }
    out
}

pub fn dst1_fft(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    if n == 0 {
        return Vec::new();
    }
    let len = 2 * (n + 1);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (i, &ui) in u.iter().enumerate() {
        buf[i + 1] = Complex64::new(ui, 0.0);
        buf[len - i - 1] = Complex64::new(-ui, 0.0);
    }
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len).process(&mut buf));
    // Z_k = -2i S_k for the odd extension.
    (1..=n).map(|k| -0.5 * buf[k].im).collect()
}

/// Unnormalised forward DFT `c_k = sum_j u_j e^{-2 pi i jk/n}`.
pub fn dft(u: &[f64]) -> Vec<Complex64> {
    let n = u.len();
    if n <= DIRECT_MAX {
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for (k, o) in out.iter_mut().enumerate() {
            for (j, &uj) in u.iter().enumerate() {
                let phase = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
                *o += Complex64::from_polar(uj, phase);
            }
        }
        out
    } else {
        let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
        buf
    }
}

/// Real part of the normalised inverse DFT `u_j = (1/n) sum_k c_k e^{2 pi i jk/n}`.
pub fn idft_real(c: &[Complex64]) -> Vec<f64> {
    let n = c.len();
    if n == 0 {
        return Vec::new();
    }
    let scale = 1.0 / n as f64;
    if n <= DIRECT_MAX {
        (0..n)
            .map(|j| {
                let mut acc = 0.0;
                for (k, ck) in c.iter().enumerate() {
                    let phase = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
                    acc += ck.re * phase.cos() - ck.im * phase.sin();
                }
                acc * scale
            })
            .collect()
    } else {
        let mut buf = c.to_vec();
        PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n).process(&mut buf));
        buf.iter().map(|z| z.re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.4).collect()
    }

    #[test]
    fn fft_and_direct_sine_transforms_agree() {
        for n in [1, 2, 3, 10, 63, 64, 65, 100, 257] {
            let u = sample(n);
            let a = dst1_direct(&u);
            let b = dst1_fft(&u);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn sine_transform_is_an_involution_up_to_scale() {
        let u = sample(40);
        let back: Vec<f64> = dst1(&dst1(&u)).iter().map(|x| x * 2.0 / 41.0).collect();
        for (x, y) in u.iter().zip(&back) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dft_roundtrip_both_paths() {
        for n in [1, 5, 64, 65, 300] {
            let u = sample(n);
            let back = idft_real(&dft(&u));
            for (x, y) in u.iter().zip(&back) {
                assert!((x - y).abs() < 1e-12, "n={n}");
            }
        }
    }
}
