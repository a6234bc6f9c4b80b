//! Binary weight files for externally trained networks.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"GRMW"
//! u32     version (1)
//! u32     orientation (0 freq1d, 1 time1d, 2 2d)
//! u32     batchnorm mode (0 batch statistics, 1 running statistics)
//! u32     stack count (3)
//! u32 x4  per stack: in, out, kh, kw
//! f32     conv weights of every stack, (out, in, kh, kw) order
//! f32     biases of every stack
//! f32     per stack: bn scale[out], shift[out], mean[out], var[out]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ConvStack, Network, Orientation, StackConfig, STACKS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRMW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    BatchStatistics,
    RunningStatistics,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::WeightFile(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::WeightFile(format!("truncated payload: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f32s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights_from(mut r: impl Read) -> Result<Network> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::WeightFile(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::WeightFile("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::WeightFile(format!("unsupported version {version}")));
    }
    let orientation = Orientation::from_code(read_u32(&mut r)?)?;
    let mode = match read_u32(&mut r)? {
        0 => BatchNormMode::BatchStatistics,
        1 => BatchNormMode::RunningStatistics,
        other => return Err(Error::WeightFile(format!("unknown batchnorm mode {other}"))),
    };
    let count = read_u32(&mut r)? as usize;
    if count != STACKS {
        return Err(Error::WeightFile(format!("expected {STACKS} stacks, header lists {count}")));
    }
    let mut configs = Vec::with_capacity(STACKS);
    for _ in 0..STACKS {
        let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|v| v as usize);
        if dims.contains(&0) {
            return Err(Error::WeightFile(format!("zero dimension in stack header {dims:?}")));
        }
        configs.push(StackConfig {
            in_channels: dims[0],
            out_channels: dims[1],
            kernel: (dims[2], dims[3]),
            pool: orientation.pool(),
        });
    }
    let mut weights = Vec::with_capacity(STACKS);
    for c in &configs {
        let flat = read_f32s(&mut r, c.weight_count())?;
        weights.push(Array2::from_shape_vec((c.out_channels, c.fan_in()), flat).expect("length checked"));
    }
    let mut biases = Vec::with_capacity(STACKS);
    for c in &configs {
        biases.push(Array1::from(read_f32s(&mut r, c.out_channels)?));
    }
    let mut stacks = Vec::with_capacity(STACKS);
    for ((config, weights), bias) in configs.into_iter().zip(weights).zip(biases) {
        let n = config.out_channels;
        let scale = Array1::from(read_f32s(&mut r, n)?);
        let shift = Array1::from(read_f32s(&mut r, n)?);
        let mean = Array1::from(read_f32s(&mut r, n)?);
        let var = Array1::from(read_f32s(&mut r, n)?);
        stacks.push(ConvStack {
            config,
            weights,
            bias,
            bn_scale: scale,
            bn_shift: shift,
            bn_running: (mode == BatchNormMode::RunningStatistics).then_some((mean, var)),
        });
    }
    Network::from_stacks(orientation, stacks)
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Network> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::UnreadableFile {
        path: path.as_ref().to_path_buf(),
        reason: e.to_string(),
    })?;
    read_weights_from(std::io::BufReader::new(file))
}

/// Serialises `net` (weights are narrowed to f32). Networks without running
/// statistics store mean 0 / var 1 and batch-statistics mode.
pub fn write_weights_to(net: &Network, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let running = net.stacks().iter().all(|s| s.bn_running.is_some());
    for v in [VERSION, net.orientation().code(), running as u32, STACKS as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for st in net.stacks() {
        let c = &st.config;
        for v in [c.in_channels, c.out_channels, c.kernel.0, c.kernel.1] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    for st in net.stacks() {
        write_f32s(&mut w, st.weights.iter())?;
    }
    for st in net.stacks() {
        write_f32s(&mut w, st.bias.iter())?;
    }
    for st in net.stacks() {
        let n = st.config.out_channels;
        let (mean, var) = match &st.bn_running {
            Some((m, v)) if running => (m.clone(), v.clone()),
            _ => (Array1::zeros(n), Array1::ones(n)),
        };
        write_f32s(&mut w, st.bn_scale.iter().chain(&st.bn_shift).chain(&mean).chain(&var))?;
    }
    Ok(())
}

pub fn write_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights_to(net, &mut file)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn narrowed(net: &Network) -> Network {
        let stacks = net
            .stacks()
            .iter()
            .cloned()
            .map(|mut s| {
                s.weights.mapv_inplace(|v| v as f32 as f64);
                s
            })
            .collect();
        Network::from_stacks(net.orientation(), stacks).unwrap()
    }

    #[test]
    fn round_trip_random_network() {
        let net = Network::init_random(Orientation::TimeChannels1d, [4, 5, 6], 3, 7, 9).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&net, &mut buf).unwrap();
        let header = 4 + 4 * 4 + 3 * 16;
        let floats = net.parameter_count() + 15 + 4 * 15;
        assert_eq!(buf.len(), header + 4 * floats);
        let back = read_weights_from(buf.as_slice()).unwrap();
        assert_eq!(back, narrowed(&net));
        assert!(back.stacks().iter().all(|s| s.bn_running.is_none()));
    }

    #[test]
    fn running_statistics_are_loaded() {
        let net = Network::init_random(Orientation::FreqChannels1d, [2, 2, 2], 3, 3, 1).unwrap();
        let stacks = net
            .stacks()
            .iter()
            .cloned()
            .map(|mut s| {
                s.bn_running = Some((Array1::from_elem(2, 0.5), Array1::from_elem(2, 2.0)));
                s
            })
            .collect();
        let net = Network::from_stacks(Orientation::FreqChannels1d, stacks).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&net, &mut buf).unwrap();
        let back = read_weights_from(buf.as_slice()).unwrap();
        assert_eq!(back.stacks()[1].bn_running, net.stacks()[1].bn_running);
    }

    #[test]
    fn truncated_and_bad_files_rejected() {
        let net = Network::init_random(Orientation::FreqChannels1d, [2, 2, 2], 3, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_weights_to(&net, &mut buf).unwrap();
        assert!(matches!(read_weights_from(&buf[..buf.len() - 3]), Err(Error::WeightFile(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_weights_from(bad.as_slice()).is_err());
        // Inconsistent stack chaining (stack 2 input != stack 1 output).
        let mut bad = buf;
        bad[36] = 9;
        assert!(read_weights_from(bad.as_slice()).is_err());
    }
}
