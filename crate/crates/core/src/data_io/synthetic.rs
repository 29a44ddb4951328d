//! Synthetic dataset with a known damage-to-path mechanism.
//!
//! Every path carries a Gaussian-enveloped tone burst delayed by its length.
//! A defect at `p` adds a second, narrower burst on path `(i, j)` scaled by
//! `exp(−d²/(2σ²))`, `d` the distance from `p` to the segment `r_i r_j`, and
//! delayed by the scatter route `|p − r_i| + |p − r_j|`. Signals are built on
//! the FFT grid and inverse-transformed, then white noise is added.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Store, StoreWriter};
use crate::geometry::{enumerate_paths, LayoutMetadata, Point};
use crate::signal_prep::{RawSample, SampleLabel};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub layout: LayoutMetadata,
    /// Shadowing width in normalised plate units.
    pub sigma: f64,
    /// Standard deviation of additive white noise, relative to a unit-peak
    /// healthy burst.
    pub noise_level: f64,
    pub samples_per_location: usize,
    pub pristine_samples: usize,
    pub signal_len: usize,
    pub sampling_rate_hz: f64,
    pub excitation_hz: f64,
    pub baseline_center_hz: f64,
    pub baseline_width_hz: f64,
    pub bump_center_hz: f64,
    pub bump_width_hz: f64,
    /// Peak of the damage burst at full deviation, relative to the healthy peak.
    pub bump_amplitude: f64,
    pub onset_us: f64,
    /// Travel time per normalised unit of distance.
    pub slowness_us: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            layout: LayoutMetadata::default_ogw(),
            sigma: 0.05,
            noise_level: 0.005,
            samples_per_location: 1,
            pristine_samples: 60,
            signal_len: 1024,
            sampling_rate_hz: 1e6,
            excitation_hz: 100e3,
            baseline_center_hz: 100e3,
            baseline_width_hz: 30e3,
            bump_center_hz: 100e3,
            bump_width_hz: 15e3,
            bump_amplitude: 0.3,
            onset_us: 100.0,
            slowness_us: 150.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise level must be non-negative");
        }
        if self.samples_per_location == 0 {
            return bad("samples per location must be positive");
        }
        if self.signal_len < 64 || !(self.sampling_rate_hz > 0.0) {
            return bad("signal length must be at least 64 with a positive sampling rate");
        }
        if !(self.baseline_width_hz > 0.0 && self.bump_width_hz > 0.0) {
            return bad("spectral widths must be positive");
        }
        let nyquist = self.sampling_rate_hz / 2.0;
        if self.baseline_center_hz >= nyquist || self.bump_center_hz >= nyquist {
            return bad("burst centre frequencies must lie below Nyquist");
        }
        self.layout.layout()?;
        self.layout.catalog()?;
        Ok(())
    }
}

/// Ground-truth deviations written next to a synthetic store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub sigma: f64,
    pub paths: Vec<(usize, usize)>,
    /// Per sample id, one deviation per path in canonical order.
    pub deviations: BTreeMap<String, Vec<f64>>,
}

/// Euclidean distance from `p` to the closed segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - (a[0] + t * vx)).hypot(p[1] - (a[1] + t * vy))
}

pub fn true_deviation(p: Point, a: Point, b: Point, sigma: f64) -> f64 {
    let d = point_segment_distance(p, a, b);
    (-d * d / (2.0 * sigma * sigma)).exp()
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

struct Synth<'a> {
    cfg: &'a SyntheticConfig,
    coords: Vec<Point>,
    pairs: Vec<(usize, usize)>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Synth<'_> {
    /// Spectral amplitude giving a time-domain envelope peak of `peak`.
    fn amplitude(&self, peak: f64, width_hz: f64) -> f64 {
        let n = self.cfg.signal_len as f64;
        let df = self.cfg.sampling_rate_hz / n;
        n * peak / (2.0 * (2.0 * std::f64::consts::PI).sqrt() * width_hz / df)
    }

    fn burst(&self, spectrum: &mut [Complex64], amp: f64, center: f64, width: f64, delay_s: f64) {
        let n = self.cfg.signal_len;
        let df = self.cfg.sampling_rate_hz / n as f64;
        for (k, slot) in spectrum.iter_mut().enumerate().take(n / 2).skip(1) {
            let f = k as f64 * df;
            let env = amp * (-(f - center).powi(2) / (2.0 * width * width)).exp();
            *slot += Complex64::from_polar(env, -2.0 * std::f64::consts::PI * f * delay_s);
        }
    }

    fn signals(&self, damage: Option<Point>, deviations: &[f64], rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let cfg = self.cfg;
        let n = cfg.signal_len;
        let us = 1e-6;
        let base_amp = self.amplitude(1.0, cfg.baseline_width_hz);
        let bump_amp = self.amplitude(cfg.bump_amplitude, cfg.bump_width_hz);
        let noise = Normal::new(0.0, cfg.noise_level).expect("validated noise level");
        let mut out = Matrix::zeros(n, self.pairs.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (col, &(i, j)) in self.pairs.iter().enumerate() {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let (ri, rj) = (self.coords[i], self.coords[j]);
            let delay = (cfg.onset_us + cfg.slowness_us * dist(ri, rj)) * us;
            self.burst(&mut buf, base_amp, cfg.baseline_center_hz, cfg.baseline_width_hz, delay);
            if let Some(p) = damage {
                let route = dist(p, ri) + dist(p, rj);
                let delay = (cfg.onset_us + cfg.slowness_us * route) * us;
                let amp = bump_amp * deviations[col];
                self.burst(&mut buf, amp, cfg.bump_center_hz, cfg.bump_width_hz, delay);
            }
            for k in 1..n.div_ceil(2) {
                buf[n - k] = buf[k].conj();
            }
            self.fft.process(&mut buf);
            for t in 0..n {
                let v = buf[t].re / n as f64;
                out[(t, col)] = if cfg.noise_level > 0.0 { v + noise.sample(rng) } else { v };
            }
        }
        out
    }
}

/// Generates a complete store at `root`, replacing any existing store.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, root: &Path) -> Result<Store> {
    cfg.validate()?;
    let layout = cfg.layout.layout()?;
    let catalog = cfg.layout.catalog()?;
    let paths = enumerate_paths(layout.len())?;
    let mut planner = FftPlanner::new();
    let synth = Synth {
        cfg,
        coords: layout.coordinates().to_vec(),
        pairs: paths.pairs().to_vec(),
        fft: planner.plan_fft_inverse(cfg.signal_len),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut writer = StoreWriter::begin(root)?;
    let mut oracle = Oracle {
        sigma: cfg.sigma,
        paths: paths.pairs().to_vec(),
        deviations: BTreeMap::new(),
    };
    for (label, p) in catalog.entries() {
        let dev: Vec<f64> = synth
            .pairs
            .iter()
            .map(|&(i, j)| true_deviation(*p, synth.coords[i], synth.coords[j], cfg.sigma))
            .collect();
        for rep in 0..cfg.samples_per_location {
            let id = format!("{label}_{rep:02}");
            let sample = RawSample {
                signals: synth.signals(Some(*p), &dev, &mut rng),
                label: SampleLabel::Damaged {
                    label: label.clone(),
                    coordinate: *p,
                },
                sampling_rate_hz: cfg.sampling_rate_hz,
                excitation_freq_hz: cfg.excitation_hz,
            };
            writer.write_sample(&id, &sample, None)?;
            oracle.deviations.insert(id, dev.clone());
        }
    }
    let zeros = vec![0.0; synth.pairs.len()];
    for k in 0..cfg.pristine_samples {
        let id = format!("P_{k:03}");
        let sample = RawSample {
            signals: synth.signals(None, &zeros, &mut rng),
            label: SampleLabel::Pristine,
            sampling_rate_hz: cfg.sampling_rate_hz,
            excitation_freq_hz: cfg.excitation_hz,
        };
        writer.write_sample(&id, &sample, None)?;
        oracle.deviations.insert(id, zeros.clone());
    }
    writer.write_extra("oracle.json", &oracle)?;
    let provenance = serde_json::json!({ "generator": cfg, "seed": seed });
    writer.commit("synthetic", cfg.layout.clone(), provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_extremes() {
        let (a, b) = ([0.1, 0.1], [0.9, 0.9]);
        assert_eq!(true_deviation([0.5, 0.5], a, b, 0.05), 1.0);
        assert!(true_deviation([0.9, 0.1], a, b, 0.05) < 1e-6);
        // beyond the segment end the distance is to the endpoint
        assert!((point_segment_distance([1.2, 0.9], a, b) - 0.3).abs() < 1e-12);
        assert_eq!(point_segment_distance([0.3, 0.4], [0.0, 0.0], [0.0, 0.0]), 0.5);
    }

    #[test]
    fn deviation_is_non_increasing_in_distance() {
        let (a, b) = ([0.1, 0.9], [0.74, 0.1]);
        let mut pts: Vec<Point> = (0..=40)
            .flat_map(|i| (0..=40).map(move |j| [i as f64 / 40.0, j as f64 / 40.0]))
            .collect();
        pts.sort_by(|p, q| {
            point_segment_distance(*p, a, b).total_cmp(&point_segment_distance(*q, a, b))
        });
        let devs: Vec<f64> = pts.iter().map(|&p| true_deviation(p, a, b, 0.05)).collect();
        assert!(devs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = SyntheticConfig::default();
        cfg.sigma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SyntheticConfig::default();
        cfg.noise_level = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn healthy_burst_has_unit_peak() {
        let cfg = SyntheticConfig {
            noise_level: 0.0,
            ..SyntheticConfig::default()
        };
        let layout = cfg.layout.layout().unwrap();
        let paths = enumerate_paths(12).unwrap();
        let mut planner = FftPlanner::new();
        let s = Synth {
            cfg: &cfg,
            coords: layout.coordinates().to_vec(),
            pairs: paths.pairs().to_vec(),
            fft: planner.plan_fft_inverse(cfg.signal_len),
        };
        let m = s.signals(None, &[0.0; 66], &mut ChaCha8Rng::seed_from_u64(0));
        let peak = m.column(0).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((peak - 1.0).abs() < 0.05, "peak {peak}");
    }
}
