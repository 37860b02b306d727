//! Fourier helpers on the uniform periodic grid x_j = 2πj/n (and its n×n
//! product on the torus): exact derivatives, mean-zero antiderivatives,
//! Fourier multipliers, shifts, trigonometric interpolation, and the
//! zero-mean inverse Laplacian.
//!
//! All transforms are planned once per size and cached per thread.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::sync::Arc;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unnormalised forward DFT of real samples.
pub fn dft(values: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan(buf.len(), false).process(&mut buf);
    buf
}

/// Inverse DFT, normalised by 1/n, real part.
pub fn idft(coeffs: &[Complex<f64>]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    plan(buf.len(), true).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Signed wavenumber of DFT bin `idx` for size `n`.
pub fn wavenumber(n: usize, idx: usize) -> f64 {
    if idx <= n / 2 {
        idx as f64
    } else {
        idx as f64 - n as f64
    }
}

/// Apply a Fourier multiplier g(k) bin-wise.
pub fn apply_multiplier(values: &[f64], g: impl Fn(f64) -> Complex<f64>) -> Vec<f64> {
    let n = values.len();
    let mut coeffs = dft(values);
    for (idx, c) in coeffs.iter_mut().enumerate() {
        *c *= g(wavenumber(n, idx));
    }
    idft(&coeffs)
}

/// Spectral d/dx. The Nyquist mode is zeroed, the symmetric choice for real
/// signals.
pub fn derivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    apply_multiplier(values, |k| {
        if n % 2 == 0 && k.abs() >= n as f64 / 2.0 {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(0.0, k)
        }
    })
}

/// Spectral d²/dx².
pub fn second_derivative(values: &[f64]) -> Vec<f64> {
    apply_multiplier(values, |k| Complex::new(-k * k, 0.0))
}

/// The unique mean-zero primitive; the input's mean is discarded.
pub fn antiderivative_mean_zero(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    apply_multiplier(values, |k| {
        if k == 0.0 || (n % 2 == 0 && k.abs() >= n as f64 / 2.0) {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(0.0, -1.0 / k)
        }
    })
}

/// Samples of x ↦ f(x − s): multiplies bin k by e^{−iks} (cosine on Nyquist).
pub fn shift(values: &[f64], s: f64) -> Vec<f64> {
    let n = values.len();
    apply_multiplier(values, |k| {
        if n % 2 == 0 && k.abs() >= n as f64 / 2.0 {
            Complex::new((k * s).cos(), 0.0)
        } else {
            Complex::from_polar(1.0, -k * s)
        }
    })
}

/// Sharp spectral cutoff: zero every mode with |k| > k_cut.
pub fn low_pass(values: &[f64], k_cut: usize) -> Vec<f64> {
    apply_multiplier(values, |k| {
        if k.abs() > k_cut as f64 {
            Complex::new(0.0, 0.0)
        } else {
            Complex::new(1.0, 0.0)
        }
    })
}

/// Trigonometric interpolant of grid samples, evaluable anywhere.
#[derive(Debug, Clone)]
pub struct TrigInterp {
    n: usize,
    coeffs: Vec<Complex<f64>>,
}

impl TrigInterp {
    pub fn new(values: &[f64]) -> Self {
        Self { n: values.len(), coeffs: dft(values) }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.n;
        let mut acc = self.coeffs[0].re;
        let half = n / 2;
        let step = Complex::from_polar(1.0, x);
        let mut e = Complex::new(1.0, 0.0);
        for k in 1..half {
            // Rotation recurrence with periodic refresh to stop drift.
            e = if k % 32 == 0 { Complex::from_polar(1.0, k as f64 * x) } else { e * step };
            acc += 2.0 * (self.coeffs[k] * e).re;
        }
        if n % 2 == 0 {
            acc += self.coeffs[half].re * (half as f64 * x).cos();
        } else if n > 1 {
            let e = Complex::from_polar(1.0, half as f64 * x);
            acc += 2.0 * (self.coeffs[half] * e).re;
        }
        acc / n as f64
    }

    pub fn eval_derivative(&self, x: f64) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        let half = n / 2;
        let step = Complex::from_polar(1.0, x);
        let mut e = Complex::new(1.0, 0.0);
        for k in 1..half {
            e = if k % 32 == 0 { Complex::from_polar(1.0, k as f64 * x) } else { e * step };
            let de = e * Complex::new(0.0, k as f64);
            acc += 2.0 * (self.coeffs[k] * de).re;
        }
        if n % 2 != 0 && n > 1 {
            let e = Complex::from_polar(1.0, half as f64 * x) * Complex::new(0.0, half as f64);
            acc += 2.0 * (self.coeffs[half] * e).re;
        }
        acc / n as f64
    }
}

/// d/dx_axis on a row-major n×n torus grid (axis 0 varies the row index).
pub fn derivative_2d(values: &[f64], n: usize, axis: usize) -> Vec<f64> {
    assert_eq!(values.len(), n * n);
    let mut out = vec![0.0; n * n];
    match axis {
        0 => {
            let mut col = vec![0.0; n];
            for j in 0..n {
                for i in 0..n {
                    col[i] = values[i * n + j];
                }
                let d = derivative(&col);
                for i in 0..n {
                    out[i * n + j] = d[i];
                }
            }
        }
        1 => {
            for i in 0..n {
                let d = derivative(&values[i * n..(i + 1) * n]);
                out[i * n..(i + 1) * n].copy_from_slice(&d);
            }
        }
        _ => panic!("axis must be 0 or 1"),
    }
    out
}

/// Zero-mean solution of −Δu = f on the n×n torus grid (f's mean discarded).
pub fn inverse_laplacian_2d(values: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(values.len(), n * n);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    // Rows then columns.
    let fwd = plan(n, false);
    for i in 0..n {
        fwd.process(&mut buf[i * n..(i + 1) * n]);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fwd.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
    for i in 0..n {
        let ki = wavenumber(n, i);
        for j in 0..n {
            let kj = wavenumber(n, j);
            let k2 = ki * ki + kj * kj;
            buf[i * n + j] = if k2 == 0.0 {
                Complex::new(0.0, 0.0)
            } else {
                buf[i * n + j] / k2
            };
        }
    }
    let inv = plan(n, true);
    for i in 0..n {
        inv.process(&mut buf[i * n..(i + 1) * n]);
    }
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        inv.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
    let scale = 1.0 / (n * n) as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// Grid nodes x_j = 2πj/n.
pub fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| crate::TAU * j as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn derivative_is_exact_on_band_limited_signals() {
        let n = 64;
        let xs = grid(n);
        let f: Vec<f64> = xs.iter().map(|&x| (3.0 * x).sin() + 0.5 * (x).cos()).collect();
        let expect: Vec<f64> = xs.iter().map(|&x| 3.0 * (3.0 * x).cos() - 0.5 * x.sin()).collect();
        let got = derivative(&f);
        for i in 0..n {
            assert_abs_diff_eq!(got[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn antiderivative_inverts_derivative_on_mean_zero_signals() {
        let n = 64;
        let xs = grid(n);
        let f: Vec<f64> = xs.iter().map(|&x| (2.0 * x).sin() - 0.3 * (5.0 * x).cos()).collect();
        let back = derivative(&antiderivative_mean_zero(&f));
        for i in 0..n {
            assert_abs_diff_eq!(back[i], f[i], epsilon = 1e-12);
        }
        let anti = antiderivative_mean_zero(&f);
        let mean: f64 = anti.iter().sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn shift_translates_samples() {
        let n = 64;
        let xs = grid(n);
        let g = |x: f64| (x).sin() + 0.2 * (4.0 * x).cos();
        let f: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
        let s = 0.37;
        let shifted = shift(&f, s);
        for i in 0..n {
            assert_abs_diff_eq!(shifted[i], g(xs[i] - s), epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_off_grid_values() {
        let n = 32;
        let xs = grid(n);
        let g = |x: f64| 1.0 + (2.0 * x).sin() - 0.7 * (3.0 * x).cos();
        let f: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
        let interp = TrigInterp::new(&f);
        for i in 0..n {
            assert_abs_diff_eq!(interp.eval(xs[i]), f[i], epsilon = 1e-12);
        }
        for &x in &[0.123, 1.9, 4.56] {
            assert_abs_diff_eq!(interp.eval(x), g(x), epsilon = 1e-12);
            let gp = 2.0 * (2.0 * x).cos() + 2.1 * (3.0 * x).sin();
            assert_abs_diff_eq!(interp.eval_derivative(x), gp, epsilon = 1e-11);
        }
    }

    #[test]
    fn inverse_laplacian_solves_poisson_on_torus() {
        let n = 32;
        let xs = grid(n);
        // u = sin x cos 2y has −Δu = 5u.
        let mut f = vec![0.0; n * n];
        let mut u = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                u[i * n + j] = xs[i].sin() * (2.0 * xs[j]).cos();
                f[i * n + j] = 5.0 * u[i * n + j];
            }
        }
        let got = inverse_laplacian_2d(&f, n);
        for idx in 0..n * n {
            assert_abs_diff_eq!(got[idx], u[idx], epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_2d_acts_per_axis() {
        let n = 32;
        let xs = grid(n);
        let mut f = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                f[i * n + j] = (xs[i]).sin() * (3.0 * xs[j]).cos();
            }
        }
        let dx = derivative_2d(&f, n, 0);
        let dy = derivative_2d(&f, n, 1);
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(dx[i * n + j], xs[i].cos() * (3.0 * xs[j]).cos(), epsilon = 1e-11);
                assert_abs_diff_eq!(dy[i * n + j], -3.0 * xs[i].sin() * (3.0 * xs[j]).sin(), epsilon = 1e-11);
            }
        }
    }
}
