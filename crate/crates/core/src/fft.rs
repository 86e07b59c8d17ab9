//! Discrete Fourier transforms for real signals.
//!
//! Power-of-two lengths use an iterative radix-2 transform. Other lengths use
//! a direct DFT when short and Bluestein's chirp-z algorithm otherwise.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{dim_err, Result};

const DIRECT_DFT_MAX: usize = 32;

/// Unnormalized complex DFT in place. `inverse` selects the `e^{+i}` kernel.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else if n <= DIRECT_DFT_MAX {
        let out = direct_dft(buf, inverse);
        buf.copy_from_slice(&out);
    } else {
        bluestein(buf, inverse);
    }
}

fn direct_dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    // reduce k*t mod n first so the angle stays small
                    let theta = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, theta)
                })
                .sum()
        })
        .collect()
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = Complex64::from_polar(1.0, step * j as f64);
                let a = buf[start + j];
                let b = buf[start + j + half] * w;
                buf[start + j] = a + b;
                buf[start + j + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // chirp w_t = exp(sign * i*pi*t^2/n); t^2 taken mod 2n to keep the angle exact
    let chirp: Vec<Complex64> = (0..n)
        .map(|t| {
            let tt = (t * t) % (2 * n);
            Complex64::from_polar(1.0, sign * PI * tt as f64 / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for t in 0..n {
        a[t] = buf[t] * chirp[t];
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for t in 1..n {
        b[t] = chirp[t].conj();
        b[m - t] = chirp[t].conj();
    }
    radix2(&mut a, false);
    radix2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    radix2(&mut a, true);
    let scale = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * scale * chirp[k];
    }
}

/// Number of non-redundant bins of a real transform of length `n`.
pub fn rfft_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Real-input DFT: returns bins `0..=n/2` of `Σ x_t e^{-2πikt/n}`.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf.truncate(rfft_bins(x.len()));
    buf
}

/// Inverse of [`rfft`]. The imaginary parts of the DC bin and, for even `n`,
/// the Nyquist bin are ignored.
pub fn irfft(spectrum: &[Complex64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || spectrum.len() != rfft_bins(n) {
        return dim_err(format!(
            "irfft of length {n} needs {} bins, got {}",
            rfft_bins(n.max(1)),
            spectrum.len()
        ));
    }
    Ok(irfft_unchecked(spectrum, n))
}

pub(crate) fn irfft_unchecked(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[0] = Complex64::new(spectrum[0].re, 0.0);
    for k in 1..spectrum.len() {
        if 2 * k == n {
            buf[k] = Complex64::new(spectrum[k].re, 0.0);
        } else {
            buf[k] = spectrum[k];
            buf[n - k] = spectrum[k].conj();
        }
    }
    fft_in_place(&mut buf, true);
    let scale = 1.0 / n as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

/// `Re Σ_{k=0}^{n/2} g_k e^{+2πikt/n}` for `t in 0..n`: the adjoint of [`rfft`].
pub(crate) fn rfft_adjoint(grad: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..grad.len()].copy_from_slice(grad);
    fft_in_place(&mut buf, true);
    buf.iter().map(|c| c.re).collect()
}

/// Weight of bin `k` when folding a one-sided spectrum of length `n` back to
/// the full two-sided one.
pub fn fold_weight(k: usize, n: usize) -> f64 {
    if k == 0 || 2 * k == n {
        1.0
    } else {
        2.0
    }
}
