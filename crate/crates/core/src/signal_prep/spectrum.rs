//! Band selection and per-column Fourier amplitude/phase extraction.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

/// Requested analysis band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub bins: usize,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            low_hz: 69.4e3,
            high_hz: 128e3,
            bins: 256,
        }
    }
}

/// Concrete FFT bins realising a [`BandSpec`] for one signal length and
/// sampling rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSelection {
    pub spec: BandSpec,
    pub signal_len: usize,
    pub sampling_rate_hz: f64,
    pub bin_indices: Vec<usize>,
    pub frequencies_hz: Vec<f64>,
    /// Bins whose centre frequency falls inside `[low_hz, high_hz]`.
    pub bins_in_band: usize,
}

impl BandSelection {
    /// Contiguous run of `spec.bins` FFT bins starting at the first bin whose
    /// centre frequency is at or above `spec.low_hz`.
    pub fn new(spec: BandSpec, signal_len: usize, sampling_rate_hz: f64) -> Result<Self> {
        if spec.bins == 0 {
            return Err(Error::Config("band must contain at least one bin".into()));
        }
        if !(spec.low_hz >= 0.0 && spec.high_hz > spec.low_hz) {
            return Err(Error::Config(format!(
                "invalid band [{}, {}] Hz",
                spec.low_hz, spec.high_hz
            )));
        }
        let nyquist = sampling_rate_hz / 2.0;
        if spec.high_hz > nyquist {
            return Err(Error::Config(format!(
                "band upper edge {} Hz exceeds Nyquist {nyquist} Hz",
                spec.high_hz
            )));
        }
        let df = sampling_rate_hz / signal_len as f64;
        let last_bin = signal_len / 2;
        let start = (spec.low_hz / df).ceil() as usize;
        let in_band = (start..=last_bin)
            .take_while(|&k| k as f64 * df <= spec.high_hz)
            .count();
        if in_band == 0 {
            return Err(Error::Config(format!(
                "no FFT bin falls inside [{}, {}] Hz at resolution {df} Hz",
                spec.low_hz, spec.high_hz
            )));
        }
        if start + spec.bins - 1 > last_bin {
            return Err(Error::Config(format!(
                "{} bins from bin {start} exceed the one-sided spectrum ({} bins)",
                spec.bins,
                last_bin + 1
            )));
        }
        let bin_indices: Vec<usize> = (start..start + spec.bins).collect();
        let frequencies_hz = bin_indices.iter().map(|&k| k as f64 * df).collect();
        Ok(Self {
            spec,
            signal_len,
            sampling_rate_hz,
            bin_indices,
            frequencies_hz,
            bins_in_band: in_band,
        })
    }

    pub fn len(&self) -> usize {
        self.bin_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bin_indices.is_empty()
    }
}

/// Amplitudes and phases at the selected bins, one row per column of the
/// input (`P×K` each).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectra<T> {
    pub amplitudes: Matrix<T>,
    pub phases: Matrix<T>,
}

/// Phase in `(-π, π]`; zero-amplitude bins get phase 0.
fn phase_of<T: Scalar>(c: Complex<T>) -> T {
    if c.re == T::zero() && c.im == T::zero() {
        return T::zero();
    }
    let p = c.im.atan2(c.re);
    if p <= -T::PI() {
        T::PI()
    } else {
        p
    }
}

/// Fourier transform of every column of `signals` (`T×P`).
pub fn column_spectra<T: Scalar>(signals: &Matrix<T>, band: &BandSelection) -> Result<Spectra<T>> {
    let (len, paths) = signals.shape();
    if len != band.signal_len {
        return Err(Error::Data(format!(
            "signal length {len} does not match band selection length {}",
            band.signal_len
        )));
    }
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(len);
    let k = band.len();
    let mut amplitudes = Matrix::zeros(paths, k);
    let mut phases = Matrix::zeros(paths, k);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); len];
    for p in 0..paths {
        for (t, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(signals[(t, p)], T::zero());
        }
        fft.process(&mut buf);
        for (j, &bin) in band.bin_indices.iter().enumerate() {
            let c = buf[bin];
            amplitudes[(p, j)] = c.norm();
            phases[(p, j)] = phase_of(c);
        }
    }
    Ok(Spectra { amplitudes, phases })
}
