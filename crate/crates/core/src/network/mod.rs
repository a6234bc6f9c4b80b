//! Fixed-weight three-stack CNN (conv -> batchnorm -> ReLU -> max-pool) with
//! forward activations and input gradients.

mod layers;
mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use layers::{BatchNormCache, BatchNormParams};

pub use weights::{read_weights, read_weights_from, write_weights, write_weights_to, BatchNormMode};

/// (B, C, H, W) activations and images.
pub type Tensor4 = Array4<f64>;

pub const DEFAULT_CHANNELS: usize = 4096;
pub const DEFAULT_KERNEL_WIDTH: usize = 11;
pub const BN_EPS: f64 = 1e-5;
pub const STACKS: usize = 3;

/// How spectrogram axes are laid onto (B, C, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// (F, T) -> (1, F, 1, T); convolution slides over time.
    FreqChannels1d,
    /// (F, T) -> (1, T, 1, F); convolution slides over frequency.
    TimeChannels1d,
    /// (F, T) -> (1, 1, F, T).
    Image2d,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::FreqChannels1d => "freq1d",
            Orientation::TimeChannels1d => "time1d",
            Orientation::Image2d => "2d",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Orientation::FreqChannels1d => 0,
            Orientation::TimeChannels1d => 1,
            Orientation::Image2d => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Orientation::FreqChannels1d),
            1 => Ok(Orientation::TimeChannels1d),
            2 => Ok(Orientation::Image2d),
            other => Err(Error::WeightFile(format!("unknown orientation code {other}"))),
        }
    }

    pub fn is_1d(self) -> bool {
        !matches!(self, Orientation::Image2d)
    }

    /// Network input channels for a (bins, frames) spectrogram.
    pub fn in_channels(self, bins: usize, frames: usize) -> usize {
        match self {
            Orientation::FreqChannels1d => bins,
            Orientation::TimeChannels1d => frames,
            Orientation::Image2d => 1,
        }
    }

    /// Per-stack output channels for a nominal channel depth. 1D stacks all
    /// use `channels`; 2D uses (c/8, c/4, c/2), i.e. (512, 1024, 2048) at 4096.
    pub fn stack_channels(self, channels: usize) -> [usize; STACKS] {
        if self.is_1d() {
            [channels; STACKS]
        } else {
            [(channels / 8).max(1), (channels / 4).max(1), (channels / 2).max(1)]
        }
    }

    pub fn kernel(self, width: usize) -> (usize, usize) {
        if self.is_1d() {
            (1, width)
        } else {
            (width, width)
        }
    }

    pub fn pool(self) -> (usize, usize) {
        if self.is_1d() {
            (1, 2)
        } else {
            (2, 2)
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq1d" | "freq_channels_1d" => Ok(Orientation::FreqChannels1d),
            "time1d" | "time_channels_1d" => Ok(Orientation::TimeChannels1d),
            "2d" | "image_2d" => Ok(Orientation::Image2d),
            other => Err(Error::InvalidConfig(format!("unknown orientation {other:?}"))),
        }
    }
}

/// Named post-ReLU layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Relu1,
    Relu2,
    Relu3,
}

impl Layer {
    pub const ALL: [Layer; STACKS] = [Layer::Relu1, Layer::Relu2, Layer::Relu3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Relu1 => "relu1",
            Layer::Relu2 => "relu2",
            Layer::Relu3 => "relu3",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu1" => Ok(Layer::Relu1),
            "relu2" => Ok(Layer::Relu2),
            "relu3" => Ok(Layer::Relu3),
            other => Err(Error::InvalidConfig(format!("unknown layer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub pool: (usize, usize),
}

impl StackConfig {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.fan_in()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub config: StackConfig,
    /// (out, in * kh * kw), flattened from (out, in, kh, kw).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    /// Running (mean, var); when present they replace batch statistics.
    pub bn_running: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    stacks: Vec<ConvStack>,
    orientation: Orientation,
    bn_eps: f64,
    seed: Option<u64>,
}

fn check_kernel(kernel: (usize, usize)) -> Result<()> {
    if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "kernel {kernel:?} must have odd extents for symmetric same padding"
        )));
    }
    Ok(())
}

impl Network {
    /// Random network: conv weights uniform in [-b, b] with b = 1/sqrt(fan_in),
    /// zero biases, identity batchnorm affine, batch statistics.
    pub fn init_random(
        orientation: Orientation,
        channels: [usize; STACKS],
        kernel_width: usize,
        in_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if kernel_width == 0 || in_channels == 0 || channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts and kernel width must be >= 1".into()));
        }
        let kernel = orientation.kernel(kernel_width);
        check_kernel(kernel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = in_channels;
        let mut stacks = Vec::with_capacity(STACKS);
        for &out in &channels {
            let config = StackConfig {
                in_channels: inputs,
                out_channels: out,
                kernel,
                pool: orientation.pool(),
            };
            let bound = 1.0 / (config.fan_in() as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((out, config.fan_in()), || rng.random_range(-bound..=bound));
            stacks.push(ConvStack {
                config,
                weights,
                bias: Array1::zeros(out),
                bn_scale: Array1::ones(out),
                bn_shift: Array1::zeros(out),
                bn_running: None,
            });
            inputs = out;
        }
        Ok(Self {
            stacks,
            orientation,
            bn_eps: BN_EPS,
            seed: Some(seed),
        })
    }

    /// Assembles a network from explicit stacks (e.g. loaded weights).
    pub fn from_stacks(orientation: Orientation, stacks: Vec<ConvStack>) -> Result<Self> {
        if stacks.len() != STACKS {
            return Err(Error::InvalidConfig(format!("expected {STACKS} stacks, got {}", stacks.len())));
        }
        let mut inputs = stacks[0].config.in_channels;
        for (n, st) in stacks.iter().enumerate() {
            let c = &st.config;
            check_kernel(c.kernel)?;
            let out = c.out_channels;
            if c.in_channels != inputs
                || st.weights.dim() != (out, c.fan_in())
                || st.bias.len() != out
                || st.bn_scale.len() != out
                || st.bn_shift.len() != out
                || st.bn_running.as_ref().is_some_and(|(m, v)| m.len() != out || v.len() != out)
            {
                return Err(Error::ShapeMismatch(format!("stack {} parameters are inconsistent", n + 1)));
            }
            inputs = out;
        }
        Ok(Self {
            stacks,
            orientation,
            bn_eps: BN_EPS,
            seed: None,
        })
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn stacks(&self) -> &[ConvStack] {
        &self.stacks
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn in_channels(&self) -> usize {
        self.stacks[0].config.in_channels
    }

    pub fn channels(&self, layer: Layer) -> usize {
        self.stacks[layer.index()].config.out_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.stacks.iter().map(|s| s.config.weight_count()).sum()
    }

    /// Spatial size of `layer` for an (H, W) input.
    pub fn layer_hw(&self, layer: Layer, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = self.orientation.pool();
        let n = layer.index() as u32;
        (h / ph.pow(n), w / pw.pow(n))
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Activations> {
        self.forward_to(input, Layer::Relu3)
    }

    /// Runs the stacks up to and including `last`.
    pub fn forward_to(&self, input: &Tensor4, last: Layer) -> Result<Activations> {
        let (_, c, h, w) = input.dim();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, network expects {}",
                self.in_channels()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let (lh, lw) = self.layer_hw(last, h, w);
        if lh == 0 || lw == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is too small for {} pooling stages",
                last.index()
            )));
        }

        let mut relu = Vec::with_capacity(last.index() + 1);
        let mut caches = Vec::with_capacity(last.index() + 1);
        let mut x = input.clone();
        for (n, st) in self.stacks.iter().enumerate().take(last.index() + 1) {
            let (kh, kw) = st.config.kernel;
            let z = layers::conv_forward(&x, &st.weights, &st.bias, kh, kw);
            let params = BatchNormParams {
                scale: &st.bn_scale,
                shift: &st.bn_shift,
                running: st.bn_running.as_ref().map(|(m, v)| (m, v)),
                eps: self.bn_eps,
            };
            let (mut y, bn) = layers::batchnorm_forward(&z, &params);
            layers::relu_inplace(&mut y);
            let (ph, pw) = st.config.pool;
            let (pooled, argmax) = layers::maxpool_forward(&y, ph, pw);
            caches.push(StackCache { bn, argmax });
            relu.push(y);
            if n < last.index() {
                x = pooled;
            }
        }
        Ok(Activations {
            input_dim: input.dim(),
            relu,
            caches,
        })
    }

    /// Backpropagates gradients injected at named ReLU outputs to the input.
    pub fn backward_input(&self, acts: &Activations, grads_at: &BTreeMap<Layer, Tensor4>) -> Result<Tensor4> {
        let Some(deepest) = grads_at.keys().max().copied() else {
            return Ok(Tensor4::zeros(acts.input_dim));
        };
        if deepest.index() >= acts.relu.len() {
            return Err(Error::MissingLayer(format!("{deepest} was not computed in the forward pass")));
        }
        for (layer, g) in grads_at {
            if g.dim() != acts.relu[layer.index()].dim() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {layer} has shape {:?}, activation {:?}",
                    g.dim(),
                    acts.relu[layer.index()].dim()
                )));
            }
        }

        let mut carried: Option<Tensor4> = None;
        for n in (0..=deepest.index()).rev() {
            let st = &self.stacks[n];
            let cache = &acts.caches[n];
            let relu_out = &acts.relu[n];
            let mut d = match carried.take() {
                Some(dpool) => layers::maxpool_backward(&dpool, &cache.argmax, relu_out.dim()),
                None => Tensor4::zeros(relu_out.dim()),
            };
            if let Some(g) = grads_at.get(&Layer::ALL[n]) {
                d += g;
            }
            layers::relu_backward_inplace(&mut d, relu_out);
            let dz = layers::batchnorm_backward(&d, &cache.bn, &st.bn_scale);
            let (kh, kw) = st.config.kernel;
            carried = Some(layers::conv_backward_input(&dz, &st.weights, st.config.in_channels, kh, kw));
        }
        Ok(carried.expect("at least one stack"))
    }
}

#[derive(Debug, Clone)]
struct StackCache {
    bn: BatchNormCache,
    argmax: Array4<u32>,
}

/// Post-ReLU outputs (recorded before pooling) plus backprop caches.
#[derive(Debug, Clone)]
pub struct Activations {
    input_dim: (usize, usize, usize, usize),
    relu: Vec<Tensor4>,
    caches: Vec<StackCache>,
}

impl Activations {
    pub fn get(&self, layer: Layer) -> Option<&Tensor4> {
        self.relu.get(layer.index())
    }

    pub fn layer(&self, layer: Layer) -> Result<&Tensor4> {
        self.get(layer)
            .ok_or_else(|| Error::MissingLayer(format!("{layer} not computed")))
    }

    pub fn depth(&self) -> usize {
        self.relu.len()
    }
}

/// Lays a single (F, T) image onto the network input axes.
pub fn orient(pixels: &Array2<f64>, o: Orientation) -> Tensor4 {
    orient_batch(std::slice::from_ref(pixels), o).expect("single image always stacks")
}

/// Stacks equally sized images on the batch axis.
pub fn orient_batch(images: &[Array2<f64>], o: Orientation) -> Result<Tensor4> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidConfig("no images to orient".into()));
    };
    let (f, t) = first.dim();
    if images.iter().any(|im| im.dim() != (f, t)) {
        return Err(Error::ShapeMismatch("batch images differ in shape".into()));
    }
    let shape = match o {
        Orientation::FreqChannels1d => (images.len(), f, 1, t),
        Orientation::TimeChannels1d => (images.len(), t, 1, f),
        Orientation::Image2d => (images.len(), 1, f, t),
    };
    let mut out = Tensor4::zeros(shape);
    for (b, im) in images.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(0), b);
        match o {
            Orientation::FreqChannels1d => dst.index_axis_mut(Axis(1), 0).assign(im),
            Orientation::TimeChannels1d => dst.index_axis_mut(Axis(1), 0).assign(&im.t()),
            Orientation::Image2d => dst.index_axis_mut(Axis(0), 0).assign(im),
        }
    }
    Ok(out)
}

/// Inverse of [`orient`] for a batch of one.
pub fn deorient(t: &Tensor4, o: Orientation) -> Result<Array2<f64>> {
    let (b, c, h, _) = t.dim();
    if b != 1 {
        return Err(Error::ShapeMismatch(format!("deorient needs batch 1, got {b}")));
    }
    let item = t.index_axis(Axis(0), 0);
    match o {
        Orientation::FreqChannels1d if h == 1 => Ok(item.index_axis(Axis(1), 0).to_owned()),
        Orientation::TimeChannels1d if h == 1 => Ok(item.index_axis(Axis(1), 0).t().to_owned()),
        Orientation::Image2d if c == 1 => Ok(item.index_axis(Axis(0), 0).to_owned()),
        _ => Err(Error::ShapeMismatch(format!("tensor {:?} does not fit orientation {o}", t.dim()))),
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array;

    use super::*;

    fn tiny(o: Orientation, in_ch: usize, seed: u64) -> Network {
        Network::init_random(o, [3, 4, 2], 3, in_ch, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Network::init_random(Orientation::FreqChannels1d, [16; 3], 11, 513, 7).unwrap();
        let b = Network::init_random(Orientation::FreqChannels1d, [16; 3], 11, 513, 7).unwrap();
        assert_eq!(a, b);
        let c = Network::init_random(Orientation::FreqChannels1d, [16; 3], 11, 513, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_scale_parameter_arithmetic() {
        let cfg = StackConfig {
            in_channels: 513,
            out_channels: 4096,
            kernel: Orientation::FreqChannels1d.kernel(11),
            pool: (1, 2),
        };
        assert_eq!(cfg.weight_count(), 513 * 4096 * 11);
        assert_eq!(cfg.weight_count(), 23_113_728);
        let one_d: usize = 513 * 4096 * 11 + 2 * 4096 * 4096 * 11;
        let ch = Orientation::Image2d.stack_channels(4096);
        assert_eq!(ch, [512, 1024, 2048]);
        let two_d = (1 * ch[0] + ch[0] * ch[1] + ch[1] * ch[2]) * 121;
        let ratio = two_d as f64 / one_d as f64;
        assert!((0.8..1.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn weight_moments() {
        let net = Network::init_random(Orientation::FreqChannels1d, [64; 3], 11, 100, 1).unwrap();
        let w = &net.stacks()[1].weights;
        let b = 1.0 / (64.0 * 11.0_f64).sqrt();
        assert!(w.iter().all(|v| v.abs() <= b));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expected = b / 3f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.05);
        assert!(net.stacks().iter().all(|s| s.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Network::init_random(Orientation::FreqChannels1d, [2; 3], 4, 3, 0).is_err());
        assert!(Network::init_random(Orientation::FreqChannels1d, [0, 2, 2], 3, 3, 0).is_err());
    }

    #[test]
    fn orient_shapes() {
        let s = Array2::<f64>::zeros((513, 431));
        assert_eq!(orient(&s, Orientation::FreqChannels1d).dim(), (1, 513, 1, 431));
        assert_eq!(orient(&s, Orientation::TimeChannels1d).dim(), (1, 431, 1, 513));
        assert_eq!(orient(&s, Orientation::Image2d).dim(), (1, 1, 513, 431));
    }

    #[test]
    fn orient_round_trip_exact() {
        let s = Array::from_shape_fn((7, 5), |(f, t)| (f * 10 + t) as f64);
        for o in [Orientation::FreqChannels1d, Orientation::TimeChannels1d, Orientation::Image2d] {
            let t = orient(&s, o);
            assert_eq!(deorient(&t, o).unwrap(), s);
        }
        let t = orient(&s, Orientation::TimeChannels1d);
        assert_eq!(t[[0, 3, 0, 6]], s[[6, 3]]);
    }

    #[test]
    fn deorient_rejects_batches() {
        let t = Tensor4::zeros((2, 3, 1, 4));
        assert!(deorient(&t, Orientation::FreqChannels1d).is_err());
        assert!(deorient(&Tensor4::zeros((1, 3, 2, 4)), Orientation::FreqChannels1d).is_err());
    }

    #[test]
    fn layer_shapes_follow_pooling() {
        let net = Network::init_random(Orientation::FreqChannels1d, [4; 3], 11, 6, 0).unwrap();
        let acts = net.forward(&Tensor4::from_elem((1, 6, 1, 431), 0.5)).unwrap();
        assert_eq!(acts.layer(Layer::Relu1).unwrap().dim(), (1, 4, 1, 431));
        assert_eq!(acts.layer(Layer::Relu2).unwrap().dim(), (1, 4, 1, 215));
        assert_eq!(acts.layer(Layer::Relu3).unwrap().dim(), (1, 4, 1, 107));

        let net2 = tiny(Orientation::Image2d, 1, 0);
        let acts = net2.forward(&Tensor4::from_elem((1, 1, 9, 13), 0.5)).unwrap();
        assert_eq!(acts.layer(Layer::Relu2).unwrap().dim(), (1, 4, 4, 6));
        assert_eq!(acts.layer(Layer::Relu3).unwrap().dim(), (1, 2, 2, 3));
    }

    #[test]
    fn zero_input_gives_zero_activations() {
        let net = tiny(Orientation::FreqChannels1d, 5, 3);
        let acts = net.forward(&Tensor4::zeros((1, 5, 1, 16))).unwrap();
        for l in Layer::ALL {
            assert!(acts.layer(l).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_and_nan_rejected() {
        let net = tiny(Orientation::FreqChannels1d, 5, 3);
        assert!(matches!(net.forward(&Tensor4::zeros((1, 4, 1, 16))), Err(Error::ShapeMismatch(_))));
        let mut x = Tensor4::zeros((1, 5, 1, 16));
        x[[0, 1, 0, 2]] = f64::NAN;
        assert!(matches!(net.forward(&x), Err(Error::NonFinite(_))));
        assert!(net.forward(&Tensor4::zeros((1, 5, 1, 3))).is_err());
    }

    #[test]
    fn zero_gradients_give_zero_input_gradient() {
        let net = tiny(Orientation::FreqChannels1d, 5, 3);
        let x = Array::from_shape_fn((1, 5, 1, 16), |(_, c, _, w)| ((c * 3 + w * 7) % 5) as f64);
        let acts = net.forward(&x).unwrap();
        let mut g = BTreeMap::new();
        for l in Layer::ALL {
            g.insert(l, Tensor4::zeros(acts.layer(l).unwrap().dim()));
        }
        let dx = net.backward_input(&acts, &g).unwrap();
        assert_eq!(dx.dim(), x.dim());
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(net.backward_input(&acts, &BTreeMap::new()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_shape_mismatch_rejected() {
        let net = tiny(Orientation::FreqChannels1d, 5, 3);
        let acts = net.forward(&Tensor4::from_elem((1, 5, 1, 16), 1.0)).unwrap();
        let g = BTreeMap::from([(Layer::Relu2, Tensor4::zeros((1, 4, 1, 7)))]);
        assert!(net.backward_input(&acts, &g).is_err());
    }
}
