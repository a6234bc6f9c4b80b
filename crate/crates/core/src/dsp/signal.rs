use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Engine sample rate. Every signal entering the pipeline is converted to it.
pub const SAMPLE_RATE: u32 = 22050;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("signal samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling. The output length is
    /// `round(len * target / source)`.
    pub fn resample(&self, target_rate: u32) -> Result<Signal> {
        if target_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Signal::new(self.samples.clone(), target_rate);
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let out = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Signal::new(out, target_rate)
    }
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a PCM (or 32-bit float) WAV file, downmixes to mono and resamples
/// to [`SAMPLE_RATE`].
pub fn load_wav(path: impl AsRef<Path>) -> Result<Signal> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| unreadable(path, e))?;
    decode(reader).map_err(|e| match e {
        Error::UnreadableFile { reason, .. } => unreadable(path, reason),
        other => other,
    })
}

/// Same as [`load_wav`] for an in-memory or streamed source.
pub fn read_wav<R: Read>(source: R) -> Result<Signal> {
    let reader = WavReader::new(source).map_err(|e| unreadable(Path::new("<stream>"), e))?;
    decode(reader)
}

fn decode<R: Read>(reader: WavReader<R>) -> Result<Signal> {
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedEncoding("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unreadable(Path::new("<stream>"), e))?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| unreadable(Path::new("<stream>"), e))?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{format:?} with {bits} bits per sample"
            )))
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Signal::new(mono, spec.sample_rate)?.resample(SAMPLE_RATE)
}

/// Writes 16-bit little-endian PCM mono. Samples are clamped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, signal: &Signal) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_wav_to(file, signal)
}

pub fn write_wav_to<W: Write + Seek>(sink: W, signal: &Signal) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::UnsupportedEncoding(other.to_string()),
    };
    let mut writer = WavWriter::new(sink, spec).map_err(io_err)?;
    for &s in signal.samples() {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}
