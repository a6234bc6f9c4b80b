//! Audio <-> spectrogram conversion: WAV I/O, STFT, log scaling,
//! Griffin-Lim phase retrieval and constant-Q remapping.

mod cqt;
mod griffin_lim;
mod signal;
mod spectrogram;
mod stft;

pub use cqt::{build_cqt_kernel, cqt_forward, cqt_inverse, CqtKernel, DEFAULT_BINS_PER_OCTAVE, DEFAULT_F_MIN};
pub use griffin_lim::{griffin_lim, spectral_convergence, GriffinLimConfig, Reconstruction};
pub use signal::{load_wav, read_wav, write_wav, write_wav_to, Signal, SAMPLE_RATE};
pub use spectrogram::{
    from_spectrogram, magnitudes_to_spectrogram, to_gray_image, to_spectrogram, write_png, Scaling, Spectrogram,
};
pub use stft::{inverse_stft, stft, ComplexSpectrogram, StftConfig, StftEngine, WindowKind};
