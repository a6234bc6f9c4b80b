use std::f64::consts::TAU;

use ndarray::Array2;
use realfft::num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::signal::Signal;
use super::stft::{ComplexSpectrogram, StftConfig, StftEngine};
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub signal: Signal,
    /// `||M - |STFT(signal)|||_F / ||M||_F`, zero for an all-zero target.
    pub spectral_convergence: f64,
}

/// `||target - |STFT(samples)|||_F / ||target||_F`.
pub fn spectral_convergence(target: &Array2<f64>, rebuilt: &ComplexSpectrogram) -> Result<f64> {
    if target.dim() != rebuilt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} vs rebuilt {:?}",
            target.dim(),
            rebuilt.shape()
        )));
    }
    let denom = target.iter().map(|m| m * m).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let num = target
        .iter()
        .zip(rebuilt.bins.iter())
        .map(|(m, c)| (m - c.norm()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Griffin-Lim settings. `momentum = 0` is the classic alternating
/// projection; positive values give the accelerated update
/// `angles = rebuilt - momentum / (1 + momentum) * previous`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLimConfig {
    pub iters: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERATIONS,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

/// Phase retrieval from magnitudes, starting from seeded uniform random
/// phases in [0, 2pi).
pub fn griffin_lim(
    magnitudes: &Array2<f64>,
    cfg: &StftConfig,
    gl: &GriffinLimConfig,
    sample_rate: u32,
) -> Result<Reconstruction> {
    if gl.iters == 0 {
        return Err(Error::InvalidConfig("griffin-lim needs at least one iteration".into()));
    }
    if !(0.0..1.0).contains(&gl.momentum) {
        return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", gl.momentum)));
    }
    if let Some(((row, col), _)) = magnitudes.indexed_iter().find(|(_, &m)| m < 0.0 || m.is_nan()) {
        return Err(Error::NegativeMagnitude { row, col });
    }
    let engine = StftEngine::new(*cfg)?;
    let (bins, frames) = magnitudes.dim();
    if bins != cfg.freq_bins() {
        return Err(Error::ShapeMismatch(format!("{bins} rows, expected {}", cfg.freq_bins())));
    }
    let length = cfg.signal_len(frames);

    let mut rng = ChaCha8Rng::seed_from_u64(gl.seed);
    let mut angles = Array2::from_shape_fn((bins, frames), |_| Complex64::from_polar(1.0, rng.random_range(0.0..TAU)));
    let blend = gl.momentum / (1.0 + gl.momentum);
    let mut previous: Option<Array2<Complex64>> = None;
    let mut samples = Vec::new();
    for _ in 0..gl.iters {
        let estimate = ComplexSpectrogram::new(&angles * magnitudes.mapv(|m| Complex64::new(m, 0.0)), *cfg)?;
        samples = engine.inverse(&estimate, Some(length))?;
        let rebuilt = engine.forward(&samples)?.bins;
        angles.assign(&rebuilt);
        if let Some(prev) = &previous {
            angles.scaled_add(Complex64::new(-blend, 0.0), prev);
        }
        angles.mapv_inplace(|c| {
            let n = c.norm();
            if n > 0.0 {
                c / n
            } else {
                Complex64::new(1.0, 0.0)
            }
        });
        previous = Some(rebuilt);
    }
    let final_stft = engine.forward(&samples)?;
    Ok(Reconstruction {
        spectral_convergence: spectral_convergence(magnitudes, &final_stft)?,
        signal: Signal::new(samples, sample_rate)?,
    })
}
