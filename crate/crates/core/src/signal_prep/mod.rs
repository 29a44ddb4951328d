//! Time-domain filtering, baseline subtraction, band-limited spectral
//! descriptors, train-only normalisation and energy-deviation targets.
//!
//! The processing chain for one sample is
//!
//! 1. zero-phase Butterworth high-pass per path,
//! 2. subtraction of the mean pristine training signal,
//! 3. Fourier amplitudes and phases at the selected band bins,
//! 4. per-(path, bin) z-scoring of amplitudes against the pristine training
//!    population,
//! 5. the energy deviation of each plate-spanning path: positive part of the
//!    mean excess of absolute normalised amplitude over its pristine mean,
//!    scaled by the largest training value and clamped to `[0, 1]`.

mod filter;
mod spectrum;

pub use filter::Butterworth;
pub use spectrum::{column_spectra, BandSelection, BandSpec, Spectra};

use serde::{Deserialize, Serialize};

use crate::geometry::{ForwardPathSet, Point};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

/// Floor applied to per-(path, bin) standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleLabel {
    Damaged { label: String, coordinate: Point },
    Pristine,
}

impl SampleLabel {
    pub fn is_damaged(&self) -> bool {
        matches!(self, SampleLabel::Damaged { .. })
    }

    pub fn damage_label(&self) -> Option<&str> {
        match self {
            SampleLabel::Damaged { label, .. } => Some(label),
            SampleLabel::Pristine => None,
        }
    }

    /// Regression target: the defect coordinate, or the no-damage reference.
    pub fn target(&self) -> Point {
        match self {
            SampleLabel::Damaged { coordinate, .. } => *coordinate,
            SampleLabel::Pristine => crate::geometry::NO_DAMAGE_TARGET,
        }
    }
}

/// One acquisition: `T×P` time signals, one column per canonical path.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample<T> {
    pub signals: Matrix<T>,
    pub label: SampleLabel,
    pub sampling_rate_hz: f64,
    pub excitation_freq_hz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub cutoff_hz: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            order: 3,
            cutoff_hz: 20e3,
        }
    }
}

pub fn highpass_filter<T: Scalar>(
    sample: &RawSample<T>,
    order: usize,
    cutoff_hz: f64,
) -> Result<RawSample<T>> {
    let filt = Butterworth::highpass(order, cutoff_hz, sample.sampling_rate_hz)?;
    apply_filter(sample, &filt)
}

fn apply_filter<T: Scalar>(sample: &RawSample<T>, filt: &Butterworth) -> Result<RawSample<T>> {
    let (len, paths) = sample.signals.shape();
    let mut out = Matrix::zeros(len, paths);
    for p in 0..paths {
        let y = filt.filtfilt(&sample.signals.column(p))?;
        out.set_column(p, &y);
    }
    Ok(RawSample {
        signals: out,
        label: sample.label.clone(),
        sampling_rate_hz: sample.sampling_rate_hz,
        excitation_freq_hz: sample.excitation_freq_hz,
    })
}

/// Pristine reference: mean signals plus the amplitude statistics of the
/// pristine training population.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSet<T> {
    /// `T×P` mean healthy signal.
    pub mean_signals: Matrix<T>,
    /// `P×K` mean raw amplitude of pristine differentials.
    pub reference_mean: Matrix<T>,
    /// `P×K` floored standard deviation of pristine differential amplitudes.
    pub reference_std: Matrix<T>,
    /// `P×K` mean absolute normalised amplitude over pristine samples.
    pub mean_abs_amplitudes: Matrix<T>,
    /// Number of (path, bin) entries whose std was floored.
    pub floored_entries: usize,
}

/// Element-wise `s - s̄`.
pub fn differential<T: Scalar>(signals: &Matrix<T>, baseline: &BaselineSet<T>) -> Result<Matrix<T>> {
    if signals.shape() != baseline.mean_signals.shape() {
        return Err(Error::Data(format!(
            "sample shape {:?} does not match baseline {:?}",
            signals.shape(),
            baseline.mean_signals.shape()
        )));
    }
    Ok(signals.zip_map(&baseline.mean_signals, |a, b| a - b))
}

fn mean_signals<T: Scalar>(samples: &[RawSample<T>]) -> Result<Matrix<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InsufficientData("no pristine training samples".into()))?;
    let shape = first.signals.shape();
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for s in samples {
        if s.signals.shape() != shape {
            return Err(Error::Data(format!(
                "pristine sample shape {:?} differs from {:?}",
                s.signals.shape(),
                shape
            )));
        }
        acc.add_assign(&s.signals);
    }
    acc.scale_inplace(T::one() / T::from_usize_lossy(samples.len()));
    Ok(acc)
}

/// Builds the pristine reference from (already filtered) pristine training
/// samples: mean signal, then per-sample differential spectra, their
/// amplitude mean/std, and the mean absolute normalised amplitude.
pub fn compute_baseline<T: Scalar>(
    pristine_train: &[RawSample<T>],
    band: &BandSelection,
) -> Result<BaselineSet<T>> {
    let mean = mean_signals(pristine_train)?;
    let spectra: Vec<Matrix<T>> = pristine_train
        .iter()
        .map(|s| {
            let diff = s.signals.zip_map(&mean, |a, b| a - b);
            column_spectra(&diff, band).map(|sp| sp.amplitudes)
        })
        .collect::<Result<_>>()?;
    let (paths, bins) = spectra[0].shape();
    let n = T::from_usize_lossy(spectra.len());
    let mut ref_mean = Matrix::zeros(paths, bins);
    for a in &spectra {
        ref_mean.add_assign(a);
    }
    ref_mean.scale_inplace(T::one() / n);
    let mut var = Matrix::zeros(paths, bins);
    for a in &spectra {
        let d = a.zip_map(&ref_mean, |x, m| (x - m) * (x - m));
        var.add_assign(&d);
    }
    let floor = T::lit(STD_FLOOR);
    let mut floored = 0;
    let ref_std = var.map(|v| (v / n).sqrt());
    let ref_std = Matrix::from_vec(
        paths,
        bins,
        ref_std
            .data()
            .iter()
            .map(|&s| {
                if s < floor {
                    floored += 1;
                    floor
                } else {
                    s
                }
            })
            .collect(),
    );
    if floored > 0 {
        log::warn!("{floored} (path, bin) amplitude deviations floored at {STD_FLOOR}");
    }
    let mut mean_abs = Matrix::zeros(paths, bins);
    for a in &spectra {
        let z = zscore(a, &ref_mean, &ref_std);
        mean_abs.add_assign(&z.map(|v| v.abs()));
    }
    mean_abs.scale_inplace(T::one() / n);
    Ok(BaselineSet {
        mean_signals: mean,
        reference_mean: ref_mean,
        reference_std: ref_std,
        mean_abs_amplitudes: mean_abs,
        floored_entries: floored,
    })
}

fn zscore<T: Scalar>(a: &Matrix<T>, mean: &Matrix<T>, std: &Matrix<T>) -> Matrix<T> {
    let centered = a.zip_map(mean, |x, m| x - m);
    centered.zip_map(std, |x, s| x / s)
}

/// Train-fit amplitude statistics and the energy normaliser.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats<T> {
    pub amp_mean: Matrix<T>,
    pub amp_std: Matrix<T>,
    pub e_max: T,
}

/// Per-path amplitudes (`P×K`) and phases of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDescriptor<T> {
    pub amplitudes: Matrix<T>,
    pub phases: Matrix<T>,
    pub normalized: bool,
}

impl<T: Scalar> SpectralDescriptor<T> {
    pub fn bins(&self) -> usize {
        self.amplitudes.cols()
    }

    /// `P×2K` matrix `[amplitudes ‖ phases]`.
    pub fn to_matrix(&self) -> Matrix<T> {
        let (p, k) = self.amplitudes.shape();
        Matrix::from_fn(p, 2 * k, |r, c| {
            if c < k {
                self.amplitudes[(r, c)]
            } else {
                self.phases[(r, c - k)]
            }
        })
    }
}

pub fn spectral_descriptor<T: Scalar>(
    diff: &Matrix<T>,
    band: &BandSelection,
    stats: Option<&NormalizationStats<T>>,
) -> Result<SpectralDescriptor<T>> {
    let s = column_spectra(diff, band)?;
    let amplitudes = match stats {
        Some(st) => {
            if st.amp_mean.shape() != s.amplitudes.shape() {
                return Err(Error::Data(format!(
                    "normalisation stats shape {:?} does not match spectrum {:?}",
                    st.amp_mean.shape(),
                    s.amplitudes.shape()
                )));
            }
            zscore(&s.amplitudes, &st.amp_mean, &st.amp_std)
        }
        None => s.amplitudes,
    };
    Ok(SpectralDescriptor {
        amplitudes,
        phases: s.phases,
        normalized: stats.is_some(),
    })
}

/// Unscaled per-path deviation `max(mean_k(|Ã| − Ā), 0)` over `fwd_paths`.
pub fn raw_energy_deviation<T: Scalar>(
    normalized_amplitudes: &Matrix<T>,
    mean_abs: &Matrix<T>,
    fwd_paths: &ForwardPathSet,
) -> Vec<T> {
    let k = T::from_usize_lossy(normalized_amplitudes.cols());
    fwd_paths
        .parent_indices()
        .iter()
        .map(|&p| {
            let excess = normalized_amplitudes
                .row(p)
                .iter()
                .zip(mean_abs.row(p))
                .fold(T::zero(), |acc, (&a, &m)| acc + (a.abs() - m));
            (excess / k).max(T::zero())
        })
        .collect()
}

/// Energy-deviation vector over the plate-spanning paths, every entry in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTarget<T> {
    pub values: Vec<T>,
}

pub fn energy_deviation<T: Scalar>(
    normalized_amplitudes: &Matrix<T>,
    baseline: &BaselineSet<T>,
    e_max: T,
    fwd_paths: &ForwardPathSet,
) -> Result<EnergyTarget<T>> {
    if !(e_max > T::zero()) {
        return Err(Error::Numeric(format!("E_max must be positive, got {e_max}")));
    }
    let values = raw_energy_deviation(normalized_amplitudes, &baseline.mean_abs_amplitudes, fwd_paths)
        .into_iter()
        .map(|v| (v / e_max).max(T::zero()).min(T::one()))
        .collect();
    Ok(EnergyTarget { values })
}

/// Fits the normalisation on the training partition only: amplitude
/// statistics come from the pristine reference population, `E_max` is the
/// largest raw deviation over all training samples and forward paths.
///
/// `train` holds the unnormalised differential amplitudes of every training
/// sample (`P×K` each).
pub fn fit_normalization<T: Scalar>(
    train: &[Matrix<T>],
    baseline: &BaselineSet<T>,
    fwd_paths: &ForwardPathSet,
) -> Result<NormalizationStats<T>> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training partition".into()));
    }
    let mut e_max = T::zero();
    for a in train {
        let z = zscore(a, &baseline.reference_mean, &baseline.reference_std);
        for v in raw_energy_deviation(&z, &baseline.mean_abs_amplitudes, fwd_paths) {
            e_max = e_max.max(v);
        }
    }
    if !(e_max > T::zero()) {
        log::warn!("training deviations are all zero; E_max floored at {STD_FLOOR}");
        e_max = T::lit(STD_FLOOR);
    }
    Ok(NormalizationStats {
        amp_mean: baseline.reference_mean.clone(),
        amp_std: baseline.reference_std.clone(),
        e_max,
    })
}

/// Features of one preprocessed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFeatures<T> {
    /// `P×2K` descriptor rows in canonical path order.
    pub descriptor: Matrix<T>,
    pub delta_e: Vec<T>,
}

/// Fitted preprocessing chain.
#[derive(Clone, Debug)]
pub struct Preprocessor<T> {
    pub filter: Butterworth,
    pub band: BandSelection,
    pub baseline: BaselineSet<T>,
    pub stats: NormalizationStats<T>,
    pub fwd_paths: ForwardPathSet,
}

impl<T: Scalar> Preprocessor<T> {
    /// Fits on the training partition. Nothing outside `train` is read.
    pub fn fit(
        train: &[RawSample<T>],
        filter: FilterSpec,
        band: BandSpec,
        fwd_paths: &ForwardPathSet,
    ) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::InsufficientData("empty training partition".into()))?;
        let fs = first.sampling_rate_hz;
        if train.iter().any(|s| s.sampling_rate_hz != fs) {
            return Err(Error::Data("mixed sampling rates in training set".into()));
        }
        let filt = Butterworth::highpass(filter.order, filter.cutoff_hz, fs)?;
        let band = BandSelection::new(band, first.signals.rows(), fs)?;
        let filtered: Vec<RawSample<T>> = train
            .iter()
            .map(|s| apply_filter(s, &filt))
            .collect::<Result<_>>()?;
        let pristine: Vec<RawSample<T>> = filtered
            .iter()
            .filter(|s| !s.label.is_damaged())
            .cloned()
            .collect();
        let baseline = compute_baseline(&pristine, &band)?;
        let amps: Vec<Matrix<T>> = filtered
            .iter()
            .map(|s| {
                let d = differential(&s.signals, &baseline)?;
                Ok(column_spectra(&d, &band)?.amplitudes)
            })
            .collect::<Result<_>>()?;
        let stats = fit_normalization(&amps, &baseline, fwd_paths)?;
        Ok(Self {
            filter: filt,
            band,
            baseline,
            stats,
            fwd_paths: fwd_paths.clone(),
        })
    }

    pub fn transform(&self, sample: &RawSample<T>) -> Result<PreparedFeatures<T>> {
        if sample.sampling_rate_hz != self.band.sampling_rate_hz {
            return Err(Error::Data(format!(
                "sampling rate {} Hz differs from fitted {} Hz",
                sample.sampling_rate_hz, self.band.sampling_rate_hz
            )));
        }
        let filtered = apply_filter(sample, &self.filter)?;
        let diff = differential(&filtered.signals, &self.baseline)?;
        let desc = spectral_descriptor(&diff, &self.band, Some(&self.stats))?;
        let target = energy_deviation(&desc.amplitudes, &self.baseline, self.stats.e_max, &self.fwd_paths)?;
        Ok(PreparedFeatures {
            descriptor: desc.to_matrix(),
            delta_e: target.values,
        })
    }
}
