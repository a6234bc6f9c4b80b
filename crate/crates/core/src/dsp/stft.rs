//! Short-time Fourier transform and its overlap-add inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::signal::Signal;
use crate::error::{Error, Result};

const NORMALIZER_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    /// Periodic Hann, which sums to a constant under 75% overlap.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rectangular",
        }
    }
}

impl std::str::FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(Error::InvalidConfig(format!("unknown window {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
    /// Frames are centred on `t * hop` using reflect padding of `window_len / 2`.
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            hop: 256,
            window: WindowKind::Hann,
            centered: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window length must be even and >= 2, got {}",
                self.window_len
            )));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::InvalidConfig(format!(
                "hop must satisfy 0 < hop <= window_len, got {}",
                self.hop
            )));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if self.centered {
            len / self.hop + 1
        } else if len <= self.window_len {
            1
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Signal length recovered from `frames` frames when no explicit length is given.
    pub fn signal_len(&self, frames: usize) -> usize {
        if self.centered {
            frames.saturating_sub(1) * self.hop
        } else {
            self.window_len + frames.saturating_sub(1) * self.hop
        }
    }
}

/// Complex STFT bins, shape (F, T) with F = window_len / 2 + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(bins: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        config.validate()?;
        if bins.nrows() != config.freq_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} frequency rows for window length {}",
                bins.nrows(),
                config.window_len
            )));
        }
        Ok(Self { bins, config })
    }

    /// Builds bins from magnitudes and phases (radians).
    pub fn from_polar(magnitudes: &Array2<f64>, phases: &Array2<f64>, config: StftConfig) -> Result<Self> {
        if magnitudes.dim() != phases.dim() {
            return Err(Error::ShapeMismatch("magnitude and phase shapes differ".into()));
        }
        let mut bins = Array2::zeros(magnitudes.dim());
        ndarray::Zip::from(&mut bins)
            .and(magnitudes)
            .and(phases)
            .for_each(|b, &m, &p| *b = Complex64::from_polar(m, p));
        Self::new(bins, config)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bins.dim()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    pub fn phases(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.arg())
    }
}

/// Index into a virtually reflect-padded sequence of length `n`
/// (edge sample not repeated; folds repeatedly for very short inputs).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Reusable FFT plans for one configuration.
pub struct StftEngine {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl StftEngine {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Self {
            window: config.window.coefficients(config.window_len),
            forward: planner.plan_fft_forward(config.window_len),
            inverse: planner.plan_fft_inverse(config.window_len),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn forward(&self, samples: &[f64]) -> Result<ComplexSpectrogram> {
        if samples.is_empty() {
            return Err(Error::EmptySignal);
        }
        let cfg = &self.config;
        let n_fft = cfg.window_len;
        let frames = cfg.frame_count(samples.len());
        let mut bins = Array2::<Complex64>::zeros((cfg.freq_bins(), frames));

        let mut frame = self.forward.make_input_vec();
        let mut spectrum = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        let offset = if cfg.centered { (n_fft / 2) as isize } else { 0 };
        for t in 0..frames {
            let start = (t * cfg.hop) as isize - offset;
            for (m, slot) in frame.iter_mut().enumerate() {
                let idx = start + m as isize;
                let x = if cfg.centered {
                    samples[reflect_index(idx, samples.len())]
                } else {
                    samples.get(idx as usize).copied().unwrap_or(0.0)
                };
                *slot = x * self.window[m];
            }
            self.forward
                .process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            bins.column_mut(t)
                .iter_mut()
                .zip(&spectrum)
                .for_each(|(b, s)| *b = *s);
        }
        ComplexSpectrogram::new(bins, *cfg)
    }

    /// Weighted overlap-add inverse, normalised by the summed squared window.
    /// `length` defaults to [`StftConfig::signal_len`].
    pub fn inverse(&self, cs: &ComplexSpectrogram, length: Option<usize>) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if cs.config != *cfg {
            return Err(Error::InvalidConfig("spectrogram config differs from engine".into()));
        }
        let (f, frames) = cs.shape();
        if f != cfg.freq_bins() {
            return Err(Error::ShapeMismatch(format!("{f} rows, expected {}", cfg.freq_bins())));
        }
        let n_fft = cfg.window_len;
        let length = length.unwrap_or_else(|| cfg.signal_len(frames));
        let offset = if cfg.centered { n_fft / 2 } else { 0 };
        let total = (frames.saturating_sub(1) * cfg.hop + n_fft).max(offset + length);

        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut spectrum = self.inverse.make_input_vec();
        let mut frame = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let scale = 1.0 / n_fft as f64;
        for t in 0..frames {
            for (s, b) in spectrum.iter_mut().zip(cs.bins.column(t)) {
                *s = *b;
            }
            // DC and Nyquist must be real for a real inverse.
            spectrum[0].im = 0.0;
            spectrum[f - 1].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            let start = t * cfg.hop;
            for m in 0..n_fft {
                acc[start + m] += frame[m] * scale * self.window[m];
                norm[start + m] += self.window[m] * self.window[m];
            }
        }

        let mut out = Vec::with_capacity(length);
        for i in 0..length {
            let j = offset + i;
            if norm[j] < NORMALIZER_FLOOR {
                return Err(Error::ReconstructionFailure { index: i, value: norm[j] });
            }
            out.push(acc[j] / norm[j]);
        }
        Ok(out)
    }
}

/// Forward STFT of a signal. Shape (window_len/2 + 1, floor(len/hop) + 1) when centred.
pub fn stft(signal: &Signal, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    StftEngine::new(*cfg)?.forward(signal.samples())
}

/// Inverse STFT at the given sample rate.
pub fn inverse_stft(cs: &ComplexSpectrogram, sample_rate: u32, length: Option<usize>) -> Result<Signal> {
    let samples = StftEngine::new(cs.config)?.inverse(cs, length)?;
    Signal::new(samples, sample_rate)
}
