//! Digital Butterworth high-pass design (bilinear transform) and zero-phase
//! forward-backward application.

use rustfft::num_complex::Complex64;

use crate::{Error, Result, Scalar};

/// Transfer-function coefficients `b(z)/a(z)` with `a[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Butterworth {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub order: usize,
    pub cutoff_hz: f64,
    pub sampling_rate_hz: f64,
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs
}

impl Butterworth {
    pub fn highpass(order: usize, cutoff_hz: f64, sampling_rate_hz: f64) -> Result<Self> {
        let nyquist = sampling_rate_hz / 2.0;
        if order == 0 {
            return Err(Error::Config("filter order must be positive".into()));
        }
        if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
            return Err(Error::Config(format!(
                "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
            )));
        }
        let fs2 = 2.0 * sampling_rate_hz;
        let warped = fs2 * (std::f64::consts::PI * cutoff_hz / sampling_rate_hz).tan();
        let n = order as f64;
        // analog low-pass prototype poles on the left half unit circle
        let proto: Vec<Complex64> = (0..order)
            .map(|k| {
                let theta = std::f64::consts::PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
                Complex64::from_polar(1.0, theta)
            })
            .collect();
        // low-pass -> high-pass: s -> wc / s
        let analog: Vec<Complex64> = proto.iter().map(|&p| warped / p).collect();
        let poles: Vec<Complex64> = analog.iter().map(|&s| (fs2 + s) / (fs2 - s)).collect();
        let zeros = vec![Complex64::new(1.0, 0.0); order];

        let a: Vec<f64> = poly_from_roots(&poles).iter().map(|c| c.re).collect();
        let b_raw: Vec<f64> = poly_from_roots(&zeros).iter().map(|c| c.re).collect();
        // unit gain at Nyquist (z = -1)
        let eval = |c: &[f64]| -> f64 {
            c.iter()
                .enumerate()
                .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
                .sum()
        };
        let gain = eval(&a) / eval(&b_raw);
        let b = b_raw.iter().map(|v| v * gain).collect();
        Ok(Self {
            b,
            a,
            order,
            cutoff_hz,
            sampling_rate_hz,
        })
    }

    /// |H(e^{jω})| of a single (one-directional) pass.
    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / self.sampling_rate_hz;
        let eval = |c: &[f64]| -> Complex64 {
            c.iter()
                .enumerate()
                .map(|(k, &v)| v * Complex64::from_polar(1.0, -w * k as f64))
                .sum()
        };
        (eval(&self.b) / eval(&self.a)).norm()
    }

    /// Steady-state initial conditions for a unit step input.
    fn step_initial_state(&self) -> Vec<f64> {
        let n = self.a.len() - 1;
        // (I - Aᵀ) zi = b[1:] - a[1:] b[0], A the companion matrix of a
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (i, row) in m.iter_mut().enumerate() {
            row[0] += self.a[i + 1];
            if i + 1 < n {
                row[i + 1] -= 1.0;
            }
        }
        let mut rhs: Vec<f64> = (0..n).map(|i| self.b[i + 1] - self.a[i + 1] * self.b[0]).collect();
        solve_in_place(&mut m, &mut rhs);
        rhs
    }

    /// Direct-form II transposed filter with initial state `zi`.
    fn lfilter<T: Scalar>(&self, x: &[T], zi: &[f64], scale: T) -> Vec<T> {
        let n = self.a.len() - 1;
        let b: Vec<T> = self.b.iter().map(|&v| T::lit(v)).collect();
        let a: Vec<T> = self.a.iter().map(|&v| T::lit(v)).collect();
        let mut z: Vec<T> = zi.iter().map(|&v| T::lit(v) * scale).collect();
        let mut y = Vec::with_capacity(x.len());
        for &xv in x {
            let yv = b[0] * xv + z[0];
            for i in 0..n {
                let next = if i + 1 < n { z[i + 1] } else { T::zero() };
                z[i] = b[i + 1] * xv + next - a[i + 1] * yv;
            }
            y.push(yv);
        }
        y
    }

    /// Zero-phase forward-backward filtering with odd padding.
    pub fn filtfilt<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        let padlen = 3 * self.a.len().max(self.b.len());
        if x.len() <= padlen {
            return Err(Error::Data(format!(
                "signal of length {} too short for zero-phase filtering (needs > {padlen})",
                x.len()
            )));
        }
        let two = T::lit(2.0);
        let len = x.len();
        let mut ext = Vec::with_capacity(len + 2 * padlen);
        for i in (1..=padlen).rev() {
            ext.push(two * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=padlen {
            ext.push(two * x[len - 1] - x[len - 1 - i]);
        }
        let zi = self.step_initial_state();
        let fwd = self.lfilter(&ext, &zi, ext[0]);
        let rev: Vec<T> = fwd.iter().rev().copied().collect();
        let bwd = self.lfilter(&rev, &zi, rev[0]);
        let mut out: Vec<T> = bwd.into_iter().rev().collect();
        out.truncate(padlen + len);
        out.drain(..padlen);
        Ok(out)
    }
}

fn solve_in_place(m: &mut [Vec<f64>], rhs: &mut [f64]) {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty");
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        let p = m[col][col];
        for row in (col + 1)..n {
            let f = m[row][col] / p;
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for k in (col + 1)..n {
            acc -= m[col][k] * rhs[k];
        }
        rhs[col] = acc / m[col][col];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Squared magnitude of a bilinear-transformed analog Butterworth
    /// high-pass, evaluated from the analog prototype.
    fn analytic_zero_phase_gain(order: usize, fc: f64, fs: f64, f: f64) -> f64 {
        let warp = |x: f64| (std::f64::consts::PI * x / fs).tan();
        let ratio = warp(fc) / warp(f);
        1.0 / (1.0 + ratio.powi(2 * order as i32))
    }

    #[test]
    fn third_order_coefficients_are_highpass() {
        let f = Butterworth::highpass(3, 20e3, 1e6).unwrap();
        assert_eq!(f.b.len(), 4);
        assert!((f.a[0] - 1.0).abs() < 1e-15);
        assert!(f.magnitude_at(0.0) < 1e-12);
        assert!((f.magnitude_at(5e5) - 1.0).abs() < 1e-12);
        // -3 dB at the cutoff
        assert!((f.magnitude_at(20e3) - 0.5f64.sqrt()).abs() < 1e-9);
        for freq in [10e3, 40e3, 100e3] {
            let expected = analytic_zero_phase_gain(3, 20e3, 1e6, freq).sqrt();
            assert!((f.magnitude_at(freq) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn cutoff_above_nyquist_rejected() {
        assert!(matches!(Butterworth::highpass(3, 6e5, 1e6), Err(Error::Config(_))));
        assert!(matches!(Butterworth::highpass(3, 5e5, 1e6), Err(Error::Config(_))));
    }

    #[test]
    fn dc_is_removed() {
        let f = Butterworth::highpass(3, 20e3, 1e6).unwrap();
        let x = vec![2.5f64; 2000];
        let y = f.filtfilt(&x).unwrap();
        let worst = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-6 * 2.5, "max residual {worst}");
    }

    #[test]
    fn passband_tone_amplitude_matches_analytic_response() {
        let fs = 1e6;
        let f0 = 100e3;
        let filt = Butterworth::highpass(3, 20e3, fs).unwrap();
        let n = 4000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / fs).sin())
            .collect();
        let y = filt.filtfilt(&x).unwrap();
        let trim = 500;
        let core = &y[trim..n - trim];
        // RMS-based amplitude; the sample grid does not hit the sine's crest
        let peak = (2.0 * core.iter().map(|v| v * v).sum::<f64>() / core.len() as f64).sqrt();
        let expected = analytic_zero_phase_gain(3, 20e3, fs, f0);
        assert!((peak - expected).abs() / expected < 0.01, "peak {peak} vs {expected}");
        assert!((peak - 1.0).abs() < 0.01);
    }

    #[test]
    fn short_signal_rejected() {
        let f = Butterworth::highpass(3, 20e3, 1e6).unwrap();
        assert!(f.filtfilt(&[1.0f64; 5]).is_err());
    }
}
