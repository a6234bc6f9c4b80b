//! Log-magnitude spectrogram images and their PNG export.

use std::path::Path;
use std::sync::Arc;

use image::{GrayImage, Luma};
use ndarray::Array2;

use super::cqt::CqtKernel;
use super::stft::{ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scaling {
    LinearStft,
    Cqt,
}

impl Scaling {
    pub fn name(self) -> &'static str {
        match self {
            Scaling::LinearStft => "stft",
            Scaling::Cqt => "cqt",
        }
    }
}

impl std::str::FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stft" | "linear" => Ok(Scaling::LinearStft),
            "cqt" => Ok(Scaling::Cqt),
            other => Err(Error::InvalidConfig(format!("unknown scaling {other:?}"))),
        }
    }
}

/// Normalised log-magnitude image, shape (frequency bins, frames).
///
/// `pixels = ln(1 + |X|) / scale_max`, so a reference normalised by its own
/// maximum spans [0, 1].
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub pixels: Array2<f64>,
    pub scale_max: f64,
    pub scaling: Scaling,
    pub config: StftConfig,
    pub cqt: Option<Arc<CqtKernel>>,
}

impl Spectrogram {
    pub fn new(pixels: Array2<f64>, scale_max: f64, scaling: Scaling, config: StftConfig) -> Result<Self> {
        if !(scale_max > 0.0 && scale_max.is_finite()) {
            return Err(Error::ZeroScale("scale_max must be positive and finite"));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("spectrogram pixels"));
        }
        Ok(Self {
            pixels,
            scale_max,
            scaling,
            config,
            cqt: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn frames(&self) -> usize {
        self.pixels.ncols()
    }

    /// Same metadata with different pixel content.
    pub fn with_pixels(&self, pixels: Array2<f64>) -> Result<Self> {
        let mut out = Spectrogram::new(pixels, self.scale_max, self.scaling, self.config)?;
        out.cqt = self.cqt.clone();
        Ok(out)
    }

    /// Re-expresses the image under another normalisation constant.
    pub fn rescaled(&self, scale_max: f64) -> Result<Self> {
        let factor = self.scale_max / scale_max;
        let mut out = self.with_pixels(self.pixels.mapv(|p| p * factor))?;
        out.scale_max = scale_max;
        Ok(out)
    }

    /// Largest `ln(1 + |X|)` value represented by this image.
    pub fn log_peak(&self) -> f64 {
        self.pixels.iter().fold(0.0_f64, |m, &p| m.max(p)) * self.scale_max
    }
}

/// Log-scales STFT magnitudes. Without `shared_scale` the image is normalised
/// by its own maximum, which fails for an all-zero input.
pub fn to_spectrogram(cs: &ComplexSpectrogram, shared_scale: Option<f64>) -> Result<Spectrogram> {
    magnitudes_to_spectrogram(&cs.magnitudes(), cs.config, shared_scale)
}

pub fn magnitudes_to_spectrogram(
    magnitudes: &Array2<f64>,
    config: StftConfig,
    shared_scale: Option<f64>,
) -> Result<Spectrogram> {
    let logs = magnitudes.mapv(|m| m.abs().ln_1p());
    let scale_max = match shared_scale {
        Some(s) => s,
        None => {
            let peak = logs.iter().fold(0.0_f64, |m, &v| m.max(v));
            if peak <= 0.0 {
                return Err(Error::ZeroScale("all-zero magnitudes without a shared scale"));
            }
            peak
        }
    };
    if !(scale_max > 0.0) {
        return Err(Error::ZeroScale("shared scale must be positive"));
    }
    Spectrogram::new(logs / scale_max, scale_max, Scaling::LinearStft, config)
}

/// Inverts the log normalisation: `exp(pixel * scale_max) - 1`, clamped at 0.
pub fn from_spectrogram(spec: &Spectrogram) -> Result<Array2<f64>> {
    if spec.scaling != Scaling::LinearStft {
        return Err(Error::InvalidConfig(
            "magnitude inversion needs a linear-STFT spectrogram; apply cqt_inverse first".into(),
        ));
    }
    Ok(spec.pixels.mapv(|p| (p * spec.scale_max).exp_m1().max(0.0)))
}

/// 8-bit grayscale rendering: frequency bin 0 on the bottom row, time on x.
pub fn to_gray_image(pixels: &Array2<f64>) -> GrayImage {
    let (bins, frames) = pixels.dim();
    GrayImage::from_fn(frames as u32, bins as u32, |x, y| {
        let v = pixels[[bins - 1 - y as usize, x as usize]];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn write_png(path: impl AsRef<Path>, pixels: &Array2<f64>) -> Result<()> {
    to_gray_image(pixels).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::E;

    use ndarray::array;
    use proptest::prelude::*;
    use realfft::num_complex::Complex64;

    use super::*;

    fn cs_from_mags(m: Array2<f64>) -> ComplexSpectrogram {
        let cfg = StftConfig { window_len: 2 * (m.nrows() - 1), hop: 1, ..Default::default() };
        let bins = m.mapv(|v| Complex64::new(0.0, v));
        ComplexSpectrogram::new(bins, cfg).unwrap()
    }

    #[test]
    fn peak_of_e_minus_one_gives_unit_scale() {
        let spec = to_spectrogram(&cs_from_mags(array![[E - 1.0, 0.0], [0.5, 0.1]]), None).unwrap();
        assert!((spec.scale_max - 1.0).abs() < 1e-15);
        assert!((spec.pixels[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_input_with_shared_scale() {
        let spec = to_spectrogram(&cs_from_mags(Array2::zeros((3, 4))), Some(1.0)).unwrap();
        assert!(spec.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_input_without_shared_scale_fails() {
        assert!(matches!(
            to_spectrogram(&cs_from_mags(Array2::zeros((3, 4))), None),
            Err(Error::ZeroScale(_))
        ));
    }

    #[test]
    fn inverse_pixel_values() {
        let cfg = StftConfig::default();
        let spec = Spectrogram::new(array![[0.0, 1.0, -0.1]], 1.0, Scaling::LinearStft, cfg).unwrap();
        let m = from_spectrogram(&spec).unwrap();
        assert_eq!(m[[0, 0]], 0.0);
        assert!((m[[0, 1]] - (E - 1.0)).abs() < 1e-15);
        assert_eq!(m[[0, 2]], 0.0);
    }

    #[test]
    fn cqt_scaled_inversion_is_rejected() {
        let spec = Spectrogram::new(array![[0.5]], 1.0, Scaling::Cqt, StftConfig::default()).unwrap();
        assert!(from_spectrogram(&spec).is_err());
    }

    #[test]
    fn png_orientation_and_quantization() {
        let px = array![[0.0, 1.0, 0.5], [2.0, -1.0, 0.25]];
        let img = to_gray_image(&px);
        assert_eq!(img.dimensions(), (3, 2));
        // bottom row is bin 0
        assert_eq!(img.get_pixel(0, 1).0[0], 0);
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
        assert_eq!(img.get_pixel(2, 1).0[0], 128);
        assert_eq!(img.get_pixel(0, 0).0[0], 255);
        assert_eq!(img.get_pixel(1, 0).0[0], 0);
        assert_eq!(img.get_pixel(2, 0).0[0], 64);
    }

    #[test]
    fn rescale_preserves_log_values() {
        let spec = Spectrogram::new(array![[0.5, 1.0]], 2.0, Scaling::LinearStft, StftConfig::default()).unwrap();
        let r = spec.rescaled(4.0).unwrap();
        assert_eq!(r.pixels, array![[0.25, 0.5]]);
        assert_eq!(from_spectrogram(&r).unwrap(), from_spectrogram(&spec).unwrap());
    }

    proptest! {
        #[test]
        fn log_scaling_round_trip(vals in proptest::collection::vec(0.0f64..1e4, 12), shared in proptest::option::of(9.5f64..20.0)) {
            let m = Array2::from_shape_vec((3, 4), vals).unwrap();
            let cs = cs_from_mags(m.clone());
            let back = match to_spectrogram(&cs, shared) {
                Ok(spec) => from_spectrogram(&spec).unwrap(),
                Err(_) => { prop_assert!(m.iter().all(|&v| v == 0.0)); return Ok(()); }
            };
            for (a, b) in back.iter().zip(&m) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
            }
        }
    }
}
