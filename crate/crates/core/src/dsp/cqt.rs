//! Constant-Q remapping of linear STFT images.
//!
//! Each constant-Q row is a triangular weighted average of the linear bins
//! around a geometrically spaced centre frequency. The inverse spreads every
//! constant-Q value back over the linear bins its triangle covers.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::spectrogram::{Scaling, Spectrogram};
use crate::error::{Error, Result};

pub const DEFAULT_F_MIN: f64 = 65.4;
pub const DEFAULT_BINS_PER_OCTAVE: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct CqtKernel {
    /// (F_cqt, F), rows sum to one.
    pub weights: Array2<f64>,
    /// (F, F_cqt)
    pub inverse_weights: Array2<f64>,
    pub f_min: f64,
    pub bins_per_octave: usize,
    pub sample_rate: u32,
}

impl CqtKernel {
    pub fn cqt_bins(&self) -> usize {
        self.weights.nrows()
    }

    pub fn linear_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn centre_frequency(&self, k: usize) -> f64 {
        self.f_min * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }
}

/// Builds the linear-to-constant-Q map for `linear_bins` STFT bins
/// (`window_len / 2 + 1`). The constant-Q bin count is
/// `floor(bpo * log2(nyquist / f_min))`.
pub fn build_cqt_kernel(f_min: f64, bins_per_octave: usize, linear_bins: usize, sample_rate: u32) -> Result<CqtKernel> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min > 0.0) || bins_per_octave == 0 || linear_bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "cqt kernel needs f_min > 0, bins_per_octave > 0, >= 2 linear bins (got {f_min}, {bins_per_octave}, {linear_bins})"
        )));
    }
    if f_min >= nyquist {
        return Err(Error::InvalidConfig(format!("f_min {f_min} Hz is not below Nyquist {nyquist} Hz")));
    }
    let bpo = bins_per_octave as f64;
    let n_cqt = (bpo * (nyquist / f_min).log2()).floor() as usize;
    if n_cqt == 0 {
        return Err(Error::InvalidConfig(format!("f_min {f_min} Hz leaves no constant-Q bins")));
    }
    let bin_hz = nyquist / (linear_bins - 1) as f64;
    let ratio = 2f64.powf(1.0 / bpo);

    let mut weights = Array2::<f64>::zeros((n_cqt, linear_bins));
    for (k, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let centre = f_min * ratio.powi(k as i32);
        // Half-width is the spacing to the next centre, but never narrower
        // than one linear bin so every row touches at least one bin.
        let half = (centre * (ratio - 1.0)).max(bin_hz);
        let lo = ((centre - half) / bin_hz).ceil().max(0.0) as usize;
        let hi = (((centre + half) / bin_hz).floor() as usize).min(linear_bins - 1);
        for j in lo..=hi {
            let w = 1.0 - ((j as f64 * bin_hz) - centre).abs() / half;
            if w > 0.0 {
                row[j] = w;
            }
        }
        let sum = row.sum();
        if sum <= 0.0 {
            let nearest = ((centre / bin_hz).round() as usize).min(linear_bins - 1);
            row[nearest] = 1.0;
        } else {
            row /= sum;
        }
    }

    let mut inverse_weights = weights.t().to_owned();
    for (j, mut row) in inverse_weights.axis_iter_mut(Axis(0)).enumerate() {
        let sum = row.sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            // Linear bin outside every triangle: copy the closest constant-Q bin.
            let f = j as f64 * bin_hz;
            let k = (bpo * (f.max(f_min) / f_min).log2()).round().clamp(0.0, (n_cqt - 1) as f64) as usize;
            row[k] = 1.0;
        }
    }

    Ok(CqtKernel {
        weights,
        inverse_weights,
        f_min,
        bins_per_octave,
        sample_rate,
    })
}

/// Maps a linear-STFT image onto constant-Q rows. `scale_max` is unchanged.
pub fn cqt_forward(spec: &Spectrogram, kernel: &Arc<CqtKernel>) -> Result<Spectrogram> {
    if spec.scaling != Scaling::LinearStft {
        return Err(Error::InvalidConfig("cqt_forward expects a linear-STFT spectrogram".into()));
    }
    if spec.bins() != kernel.linear_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, kernel expects {}",
            spec.bins(),
            kernel.linear_bins()
        )));
    }
    let mut out = Spectrogram::new(kernel.weights.dot(&spec.pixels), spec.scale_max, Scaling::Cqt, spec.config)?;
    out.cqt = Some(Arc::clone(kernel));
    Ok(out)
}

pub fn cqt_inverse(spec: &Spectrogram, kernel: &Arc<CqtKernel>) -> Result<Spectrogram> {
    if spec.scaling != Scaling::Cqt {
        return Err(Error::InvalidConfig("cqt_inverse expects a constant-Q spectrogram".into()));
    }
    if spec.bins() != kernel.cqt_bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, kernel produces {}",
            spec.bins(),
            kernel.cqt_bins()
        )));
    }
    let mut out = Spectrogram::new(
        kernel.inverse_weights.dot(&spec.pixels),
        spec.scale_max,
        Scaling::LinearStft,
        spec.config,
    )?;
    out.cqt = Some(Arc::clone(kernel));
    Ok(out)
}
