//! End-to-end pipelines: style transfer, texture synthesis (including
//! outputs longer than the reference), and multi-texture blending.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{
    build_cqt_kernel, cqt_forward, cqt_inverse, from_spectrogram, griffin_lim, magnitudes_to_spectrogram, stft,
    CqtKernel, GriffinLimConfig, Scaling, Signal, Spectrogram, StftConfig, DEFAULT_BINS_PER_OCTAVE, DEFAULT_F_MIN,
};
use crate::error::{Error, Result};
use crate::losses::{content_targets, style_targets, total_objective, LayerSets, LossWeights, Targets};
use crate::network::{orient, orient_batch, Network, Orientation, DEFAULT_CHANNELS, DEFAULT_KERNEL_WIDTH};
use crate::optim::{minimize, Evaluation, OptConfig, RunTrace};

/// Starting image of the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Seeded uniform noise in [0, 1).
    #[default]
    Noise,
    /// Copy of the content image.
    Content,
    /// Copy of the first style image, tiled to the output width.
    Style,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Noise => "noise",
            Init::Content => "content",
            Init::Style => "style",
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Init::Noise),
            "content" | "content_clone" => Ok(Init::Content),
            "style" => Ok(Init::Style),
            other => Err(Error::InvalidConfig(format!("unknown init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthJob {
    pub content: Option<Signal>,
    pub styles: Vec<Signal>,
    pub weights: LossWeights,
    pub layers: LayerSets,
    pub orientation: Orientation,
    pub kernel_width: usize,
    pub channels: usize,
    pub scaling: Scaling,
    pub init: Init,
    /// Output width in frames; defaults to the reference width.
    pub out_frames: Option<usize>,
    pub seed: u64,
    pub opt: OptConfig,
    pub stft: StftConfig,
    pub gl_iters: usize,
    pub gl_momentum: f64,
    /// Externally supplied weights; replaces the random network.
    pub network: Option<Arc<Network>>,
}

impl SynthJob {
    /// Texture job with the default hyperparameters.
    pub fn texture(style: Signal) -> Self {
        let gl = GriffinLimConfig::default();
        Self {
            content: None,
            styles: vec![style],
            weights: LossWeights::default(),
            layers: LayerSets::default(),
            orientation: Orientation::FreqChannels1d,
            kernel_width: DEFAULT_KERNEL_WIDTH,
            channels: DEFAULT_CHANNELS,
            scaling: Scaling::LinearStft,
            init: Init::Noise,
            out_frames: None,
            seed: 0,
            opt: OptConfig::default(),
            stft: StftConfig::default(),
            gl_iters: gl.iters,
            gl_momentum: gl.momentum,
            network: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.styles.is_empty() {
            return bad("at least one style reference is required".into());
        }
        self.weights.validate()?;
        self.opt.validate()?;
        self.stft.validate()?;
        if self.content.is_none() {
            if self.weights.alpha > 0.0 {
                return bad("alpha > 0 requires a content reference".into());
            }
            if self.init == Init::Content {
                return bad("content init requires a content reference".into());
            }
        }
        if self.kernel_width == 0 || self.kernel_width % 2 == 0 {
            return bad(format!("kernel width must be odd, got {}", self.kernel_width));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.gl_iters == 0 {
            return bad("griffin-lim needs at least one iteration".into());
        }
        if let Some(0) = self.out_frames {
            return bad("out_frames must be >= 1".into());
        }
        Ok(())
    }

    fn griffin_lim_config(&self) -> GriffinLimConfig {
        GriffinLimConfig {
            iters: self.gl_iters,
            momentum: self.gl_momentum,
            seed: self.seed,
        }
    }
}

/// Reference images in the optimization domain plus the network targets.
#[derive(Debug, Clone)]
pub struct PreparedTargets {
    pub targets: Targets,
    /// Shared `scale_max` of every image in the run.
    pub scale_max: f64,
    /// Style images after tiling, on the shared scale.
    pub styles: Vec<Spectrogram>,
    pub content: Option<Spectrogram>,
    pub style_batch_shape: (usize, usize, usize, usize),
    pub cqt: Option<Arc<CqtKernel>>,
}

fn tile_columns(pixels: &Array2<f64>, width: usize) -> Array2<f64> {
    let t = pixels.ncols();
    Array2::from_shape_fn((pixels.nrows(), width), |(f, j)| pixels[[f, j % t]])
}

fn reference_images(job: &SynthJob) -> Result<(Vec<Spectrogram>, Option<Spectrogram>, f64, Option<Arc<CqtKernel>>)> {
    let mags = job
        .styles
        .iter()
        .chain(job.content.as_ref())
        .map(|s| Ok(stft(s, &job.stft)?.magnitudes()))
        .collect::<Result<Vec<_>>>()?;
    let peak = mags
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0_f64, |acc, &m| acc.max(m.ln_1p()));
    if peak <= 0.0 {
        return Err(Error::ZeroScale("all reference sounds are silent"));
    }
    let cqt = match job.scaling {
        Scaling::LinearStft => None,
        Scaling::Cqt => Some(Arc::new(build_cqt_kernel(
            DEFAULT_F_MIN,
            DEFAULT_BINS_PER_OCTAVE,
            job.stft.freq_bins(),
            job.stft_sample_rate(),
        )?)),
    };
    let mut images = mags
        .iter()
        .map(|m| {
            let s = magnitudes_to_spectrogram(m, job.stft, Some(peak))?;
            match &cqt {
                Some(k) => cqt_forward(&s, k),
                None => Ok(s),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let content = job.content.as_ref().map(|_| images.pop().expect("content image"));
    Ok((images, content, peak, cqt))
}

impl SynthJob {
    fn stft_sample_rate(&self) -> u32 {
        self.styles[0].sample_rate()
    }

    /// Width of the optimized image.
    fn resolve_out_frames(&self, style_frames: usize, content: Option<&Spectrogram>) -> Result<usize> {
        match (content, self.out_frames) {
            (Some(c), Some(w)) if (self.weights.alpha > 0.0 || self.init == Init::Content) && w != c.frames() => {
                Err(Error::ShapeMismatch(format!(
                    "content has {} frames but {w} output frames were requested",
                    c.frames()
                )))
            }
            (_, Some(w)) => Ok(w),
            (Some(c), None) => Ok(c.frames()),
            (None, None) => Ok(style_frames),
        }
    }
}

fn build_network(job: &SynthJob, bins: usize, frames: usize) -> Result<Arc<Network>> {
    let in_channels = job.orientation.in_channels(bins, frames);
    match &job.network {
        Some(net) => {
            if net.orientation() != job.orientation {
                return Err(Error::ShapeMismatch(format!(
                    "weights are for {} orientation, job uses {}",
                    net.orientation(),
                    job.orientation
                )));
            }
            if net.in_channels() != in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "weights expect {} input channels, job provides {in_channels}",
                    net.in_channels()
                )));
            }
            Ok(Arc::clone(net))
        }
        None => Ok(Arc::new(Network::init_random(
            job.orientation,
            job.orientation.stack_channels(job.channels),
            job.kernel_width,
            in_channels,
            job.seed,
        )?)),
    }
}

/// Everything fixed before optimization starts.
struct Plan {
    prepared: PreparedTargets,
    net: Arc<Network>,
    out_frames: usize,
}

fn plan(job: &SynthJob) -> Result<Plan> {
    job.validate()?;
    let (mut styles, content, scale_max, cqt) = reference_images(job)?;
    let longest = styles.iter().map(Spectrogram::frames).max().expect("validated non-empty");
    let out_frames = job.resolve_out_frames(longest, content.as_ref())?;
    // Frame-channel networks see every frame as a channel, so all images
    // must share the output width.
    let style_width = if job.orientation == Orientation::TimeChannels1d {
        out_frames
    } else {
        longest
    };
    for s in &mut styles {
        if s.frames() != style_width {
            *s = s.with_pixels(tile_columns(&s.pixels, style_width))?;
        }
    }
    let bins = styles[0].bins();
    let net = build_network(job, bins, out_frames)?;
    let batch = orient_batch(&styles.iter().map(|s| s.pixels.clone()).collect::<Vec<_>>(), job.orientation)?;
    let mut targets = Targets::default();
    if job.weights.beta > 0.0 {
        targets.style = style_targets(&net, &batch, &job.layers.style)?;
    }
    if job.weights.alpha > 0.0 {
        let c = content.as_ref().expect("validated");
        targets.content = content_targets(&net, &orient(&c.pixels, job.orientation), &job.layers.content)?;
    }
    Ok(Plan {
        prepared: PreparedTargets {
            targets,
            scale_max,
            style_batch_shape: batch.dim(),
            styles,
            content,
            cqt,
        },
        net,
        out_frames,
    })
}

/// Style Grams of the stacked references, content activations and the
/// shared normalisation scale.
pub fn prepare_targets(job: &SynthJob) -> Result<PreparedTargets> {
    Ok(plan(job)?.prepared)
}

#[derive(Debug, Clone)]
pub struct SynthResult {
    /// Optimized image in the job's frequency scaling.
    pub spectrogram: Spectrogram,
    pub audio: Signal,
    pub trace: RunTrace,
    pub metadata: Metadata,
    pub spectral_convergence: f64,
    pub initial_pixels: Array2<f64>,
    pub prepared: PreparedTargets,
    pub network: Arc<Network>,
}

/// Resolved job settings as ordered key/value pairs, plus derived values.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub settings: Vec<(&'static str, String)>,
    pub derived: Vec<(&'static str, String)>,
}

fn layer_list(set: &std::collections::BTreeSet<crate::network::Layer>) -> String {
    set.iter().map(|l| l.name()).collect::<Vec<_>>().join(",")
}

fn metadata(job: &SynthJob, out_frames: usize, scale_max: f64, sc: f64, trace: &RunTrace) -> Metadata {
    let o = &job.opt;
    let mut settings = vec![
        ("alpha", format!("{:e}", job.weights.alpha)),
        ("beta", format!("{:e}", job.weights.beta)),
        ("gamma", format!("{:e}", job.weights.gamma)),
        ("style-layers", layer_list(&job.layers.style)),
        ("content-layers", layer_list(&job.layers.content)),
        ("orientation", job.orientation.name().to_string()),
        ("kernel-width", job.kernel_width.to_string()),
        ("channels", job.channels.to_string()),
        ("scaling", job.scaling.name().to_string()),
        ("init", job.init.name().to_string()),
        ("out-frames", out_frames.to_string()),
        ("iters", o.iterations.to_string()),
        ("seed", job.seed.to_string()),
        ("method", o.method.name().to_string()),
        ("log-every", o.log_every.to_string()),
        ("lbfgs-history", o.lbfgs_history.to_string()),
        ("lbfgs-step", format!("{:e}", o.lbfgs_step)),
        ("lbfgs-inner", o.lbfgs_inner.to_string()),
        ("adam-lr", format!("{:e}", o.adam_lr)),
        ("gl-iters", job.gl_iters.to_string()),
        ("gl-momentum", format!("{:e}", job.gl_momentum)),
    ];
    if job.network.is_some() {
        settings.retain(|(k, _)| *k != "channels" && *k != "kernel-width");
    }
    let mut derived = vec![
        ("scale-max", format!("{scale_max:e}")),
        ("spectral-convergence", format!("{sc:e}")),
        ("initial-loss", format!("{:e}", trace.initial.total)),
        ("final-loss", format!("{:e}", trace.last.total)),
        ("evaluations", trace.evaluations.to_string()),
        ("rollbacks", trace.rollbacks.to_string()),
    ];
    if job.scaling == Scaling::Cqt && job.orientation != Orientation::TimeChannels1d {
        derived.push(("note", "constant-Q scaling paired with a non-time1d orientation".into()));
    }
    Metadata { settings, derived }
}

fn initial_image(job: &SynthJob, prepared: &PreparedTargets, out_frames: usize) -> Array2<f64> {
    let bins = prepared.styles[0].bins();
    match job.init {
        Init::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
            // Stream 0 draws the network weights.
            rng.set_stream(1);
            Array2::from_shape_simple_fn((bins, out_frames), || rng.random_range(0.0..1.0))
        }
        Init::Content => prepared.content.as_ref().expect("validated").pixels.clone(),
        Init::Style => tile_columns(&prepared.styles[0].pixels, out_frames),
    }
}

fn optimize(job: &SynthJob, plan: Plan) -> Result<SynthResult> {
    let Plan {
        prepared,
        net,
        out_frames,
    } = plan;
    if out_frames < job.kernel_width && job.network.is_none() {
        return Err(Error::InvalidConfig(format!(
            "out_frames {out_frames} is smaller than the kernel width {}",
            job.kernel_width
        )));
    }
    let x0 = initial_image(job, &prepared, out_frames);
    let shape = x0.dim();
    let flat = Array1::from_iter(x0.iter().copied());
    let objective = |x: &Array1<f64>| -> Result<Evaluation> {
        let img = x.view().into_shape_with_order(shape).expect("flat image").to_owned();
        let obj = total_objective(&net, &img, &prepared.targets, &job.weights, &job.layers)?;
        Ok(Evaluation {
            loss: obj.total,
            grad: Array1::from_iter(obj.grad.iter().copied()),
            terms: obj.terms,
        })
    };
    let (x, trace) = minimize(objective, flat, &job.opt)?;
    let pixels = x.into_shape_with_order(shape).expect("flat image");

    let template = &prepared.styles[0];
    let spectrogram = template.with_pixels(pixels)?;
    let linear = match &prepared.cqt {
        Some(k) => cqt_inverse(&spectrogram, k)?,
        None => spectrogram.clone(),
    };
    let mags = from_spectrogram(&linear)?;
    let rebuilt = griffin_lim(&mags, &job.stft, &job.griffin_lim_config(), job.stft_sample_rate())?;
    let meta = metadata(job, out_frames, prepared.scale_max, rebuilt.spectral_convergence, &trace);
    Ok(SynthResult {
        spectrogram,
        audio: rebuilt.signal,
        trace,
        metadata: meta,
        spectral_convergence: rebuilt.spectral_convergence,
        initial_pixels: x0,
        prepared,
        network: net,
    })
}

/// Optimizes toward the content activations and style Grams of the job's
/// references.
pub fn style_transfer(job: &SynthJob) -> Result<SynthResult> {
    if job.content.is_none() {
        return Err(Error::InvalidConfig("style transfer needs a content reference".into()));
    }
    optimize(job, plan(job)?)
}

/// Matches style statistics only; the output may be wider than the reference.
pub fn texture_synthesize(job: &SynthJob) -> Result<SynthResult> {
    if job.weights.alpha != 0.0 {
        return Err(Error::InvalidConfig("texture synthesis requires alpha = 0".into()));
    }
    if job.init == Init::Content {
        return Err(Error::InvalidConfig("texture synthesis cannot start from a content image".into()));
    }
    optimize(job, plan(job)?)
}

/// Dispatches on whether the job carries a content reference.
pub fn run_job(job: &SynthJob) -> Result<SynthResult> {
    if job.content.is_some() {
        style_transfer(job)
    } else {
        texture_synthesize(job)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use crate::losses::gram;
    use crate::network::Layer;

    fn tone(freq: f64, secs: f64, amp: f64) -> Signal {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let x = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Signal::new(x, SAMPLE_RATE).unwrap()
    }

    fn small(style: Signal) -> SynthJob {
        SynthJob {
            channels: 16,
            kernel_width: 3,
            gl_iters: 4,
            opt: OptConfig {
                iterations: 3,
                lbfgs_inner: 3,
                ..Default::default()
            },
            ..SynthJob::texture(style)
        }
    }

    #[test]
    fn validation_rules() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.weights.alpha = 1.0;
        assert!(matches!(run_job(&job), Err(Error::InvalidConfig(_))));
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.styles.clear();
        assert!(job.validate().is_err());
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.init = Init::Content;
        assert!(job.validate().is_err());
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.kernel_width = 4;
        assert!(job.validate().is_err());
    }

    #[test]
    fn silent_reference_has_no_scale() {
        let job = small(Signal::new(vec![0.0; 4000], SAMPLE_RATE).unwrap());
        assert!(matches!(run_job(&job), Err(Error::ZeroScale(_))));
    }

    #[test]
    fn shared_scale_is_the_loudest_reference() {
        let mut job = small(tone(440.0, 0.2, 0.1));
        job.styles.push(tone(300.0, 0.2, 0.8));
        let p = prepare_targets(&job).unwrap();
        let loud = stft(&job.styles[1], &job.stft).unwrap().magnitudes();
        let want = loud.iter().fold(0.0_f64, |m, v| m.max(v.ln_1p()));
        assert_eq!(p.scale_max, want);
        assert!(p.styles.iter().all(|s| s.scale_max == want));
        let quiet_peak = p.styles[0].pixels.iter().fold(0.0_f64, |m, &v| m.max(v));
        assert!(quiet_peak < 1.0);
    }

    #[test]
    fn unequal_references_are_tiled_to_the_longest() {
        let mut job = small(tone(440.0, 0.1, 0.5));
        job.styles.push(tone(300.0, 0.3, 0.5));
        let p = prepare_targets(&job).unwrap();
        let t = job.stft.frame_count(job.styles[1].len());
        assert_eq!(p.style_batch_shape, (2, 513, 1, t));
        let short = job.stft.frame_count(job.styles[0].len());
        assert_eq!(p.styles[0].pixels.column(short), p.styles[0].pixels.column(0));
    }

    #[test]
    fn single_reference_gram_equals_plain_pass() {
        let job = small(tone(440.0, 0.2, 0.5));
        let pl = plan(&job).unwrap();
        let acts = pl
            .net
            .forward(&orient(&pl.prepared.styles[0].pixels, job.orientation))
            .unwrap();
        for l in [Layer::Relu1, Layer::Relu2] {
            assert_eq!(pl.prepared.targets.style[&l], gram(acts.layer(l).unwrap()));
        }
    }

    #[test]
    fn noise_init_is_seeded_uniform() {
        let job = small(tone(440.0, 0.2, 0.5));
        let pl = plan(&job).unwrap();
        let a = initial_image(&job, &pl.prepared, 30);
        assert_eq!(a, initial_image(&job, &pl.prepared, 30));
        assert!(a.iter().all(|&v| (0.0..1.0).contains(&v)));
        let other = SynthJob { seed: 1, ..job.clone() };
        assert_ne!(a, initial_image(&other, &pl.prepared, 30));
    }

    #[test]
    fn content_fixes_output_width() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.content = Some(tone(220.0, 0.3, 0.5));
        job.weights = LossWeights::new(1.0, 1e3, 1e-3).unwrap();
        job.out_frames = Some(5);
        assert!(matches!(style_transfer(&job), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn out_frames_below_kernel_width_rejected() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.kernel_width = 11;
        job.out_frames = Some(9);
        assert!(matches!(texture_synthesize(&job), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn texture_run_shapes_and_audio_length() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.out_frames = Some(40);
        let r = run_job(&job).unwrap();
        assert_eq!(r.spectrogram.pixels.dim(), (513, 40));
        assert_eq!(r.audio.len(), 39 * 256);
        assert_eq!(r.trace.records.len(), 3);
        assert!(r.trace.last.style.is_finite());
    }

    #[test]
    fn cqt_with_frame_channels_wires_shapes() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.scaling = Scaling::Cqt;
        job.orientation = Orientation::TimeChannels1d;
        let r = run_job(&job).unwrap();
        let frames = job.stft.frame_count(job.styles[0].len());
        assert_eq!(r.network.in_channels(), frames);
        assert_eq!(r.spectrogram.pixels.dim(), (177, frames));
        assert_eq!(r.spectrogram.scaling, Scaling::Cqt);
        assert_eq!(r.audio.len(), (frames - 1) * 256);
    }

    #[test]
    fn frame_channels_need_matching_width() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.orientation = Orientation::TimeChannels1d;
        job.network = Some(Arc::new(
            Network::init_random(Orientation::TimeChannels1d, [4; 3], 3, 17, 0).unwrap(),
        ));
        assert!(matches!(run_job(&job), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn metadata_flags_unusual_cqt_pairing() {
        let mut job = small(tone(440.0, 0.2, 0.5));
        job.scaling = Scaling::Cqt;
        let r = run_job(&job).unwrap();
        assert!(r.metadata.derived.iter().any(|(k, _)| *k == "note"));
        assert!(r.metadata.settings.iter().any(|(k, v)| *k == "scaling" && v == "cqt"));
    }
}
