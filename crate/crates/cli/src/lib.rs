//! Command-line front end: flag and config-file parsing, job execution and
//! artifact export.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Parser;
use gramophone_core::dsp::{load_wav, write_png, write_wav, Scaling};
use gramophone_core::losses::{LayerSets, LossWeights};
use gramophone_core::network::{read_weights, Layer, Orientation, DEFAULT_CHANNELS, DEFAULT_KERNEL_WIDTH};
use gramophone_core::optim::{Method, OptConfig};
use gramophone_core::synth::{run_job, Init, SynthJob, SynthResult};

#[derive(Debug, Clone, Default, Parser)]
#[command(name = "gramophone", version, about = "Audio texture synthesis and style transfer")]
pub struct Args {
    /// Content sound (WAV). Required when --alpha > 0.
    #[arg(long)]
    pub content: Option<PathBuf>,
    /// Style sound (WAV); repeat for multi-texture blending.
    #[arg(long = "style")]
    pub styles: Vec<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// freq1d, time1d or 2d.
    #[arg(long)]
    pub orientation: Option<Orientation>,
    #[arg(long)]
    pub kernel_width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// stft or cqt.
    #[arg(long)]
    pub scaling: Option<Scaling>,
    /// noise, content or style.
    #[arg(long)]
    pub init: Option<Init>,
    #[arg(long)]
    pub out_frames: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trained network weights file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lbfgs or adam.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub lbfgs_history: Option<usize>,
    #[arg(long)]
    pub lbfgs_step: Option<f64>,
    #[arg(long)]
    pub lbfgs_inner: Option<usize>,
    #[arg(long)]
    pub adam_lr: Option<f64>,
    #[arg(long)]
    pub gl_iters: Option<usize>,
    #[arg(long)]
    pub gl_momentum: Option<f64>,
    /// Comma-separated subset of relu1,relu2,relu3.
    #[arg(long)]
    pub style_layers: Option<String>,
    #[arg(long)]
    pub content_layers: Option<String>,
    #[arg(long)]
    pub no_png: bool,
    #[arg(long)]
    pub no_trace: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Clap(clap::Error),
    Run(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gramophone_core::Error> for CliError {
    fn from(e: gramophone_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Clap(e) => e.exit_code(),
            CliError::Run(_) => 1,
        }
    }
}

/// Fully resolved invocation.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub content: Option<PathBuf>,
    pub styles: Vec<PathBuf>,
    pub weights: LossWeights,
    pub layers: LayerSets,
    pub orientation: Orientation,
    pub kernel_width: usize,
    pub channels: usize,
    pub scaling: Scaling,
    pub init: Init,
    pub out_frames: Option<usize>,
    pub seed: u64,
    pub opt: OptConfig,
    pub gl_iters: usize,
    pub gl_momentum: f64,
    pub weights_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub png_export: bool,
    pub trace_export: bool,
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("bad value {value:?} for {key}: {e}")))
}

fn set<T: std::str::FromStr>(slot: &mut Option<T>, key: &str, value: &str) -> Result<(), CliError>
where
    T::Err: fmt::Display,
{
    if slot.is_none() {
        *slot = Some(parse_value(key, value)?);
    }
    Ok(())
}

/// Relative paths in a config file are resolved against the file's directory.
fn file_path(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Fills every field the command line left unset from `key = value` lines.
fn apply_config_file(args: &mut Args, text: &str, base: &Path) -> Result<(), CliError> {
    let cli_styles = !args.styles.is_empty();
    let mut file_styles = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "style" => file_styles.push(file_path(base, value)),
            "content" => {
                if args.content.is_none() {
                    args.content = Some(file_path(base, value));
                }
            }
            "weights" => {
                if args.weights.is_none() {
                    args.weights = Some(file_path(base, value));
                }
            }
            "out" => {
                if args.out.is_none() {
                    args.out = Some(file_path(base, value));
                }
            }
            "alpha" => set(&mut args.alpha, key, value)?,
            "beta" => set(&mut args.beta, key, value)?,
            "gamma" => set(&mut args.gamma, key, value)?,
            "orientation" => set(&mut args.orientation, key, value)?,
            "kernel-width" => set(&mut args.kernel_width, key, value)?,
            "channels" => set(&mut args.channels, key, value)?,
            "scaling" => set(&mut args.scaling, key, value)?,
            "init" => set(&mut args.init, key, value)?,
            "out-frames" => set(&mut args.out_frames, key, value)?,
            "iters" => set(&mut args.iters, key, value)?,
            "seed" => set(&mut args.seed, key, value)?,
            "method" => set(&mut args.method, key, value)?,
            "log-every" => set(&mut args.log_every, key, value)?,
            "lbfgs-history" => set(&mut args.lbfgs_history, key, value)?,
            "lbfgs-step" => set(&mut args.lbfgs_step, key, value)?,
            "lbfgs-inner" => set(&mut args.lbfgs_inner, key, value)?,
            "adam-lr" => set(&mut args.adam_lr, key, value)?,
            "gl-iters" => set(&mut args.gl_iters, key, value)?,
            "gl-momentum" => set(&mut args.gl_momentum, key, value)?,
            "style-layers" => set(&mut args.style_layers, key, value)?,
            "content-layers" => set(&mut args.content_layers, key, value)?,
            "png" => args.no_png |= !parse_value::<bool>(key, value)?,
            "trace" => args.no_trace |= !parse_value::<bool>(key, value)?,
            other => return Err(usage(format!("config line {}: unknown key {other:?}", n + 1))),
        }
    }
    if !cli_styles {
        args.styles = file_styles;
    }
    Ok(())
}

fn parse_layers(key: &str, list: &str) -> Result<BTreeSet<Layer>, CliError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl CliConfig {
    pub fn from_args(mut args: Args) -> Result<Self, CliError> {
        if let Some(path) = args.config.clone() {
            let text = fs::read_to_string(&path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            apply_config_file(&mut args, &text, &base)?;
        }
        if args.styles.is_empty() {
            return Err(usage("at least one --style is required"));
        }
        let defaults = LossWeights::default();
        let weights = LossWeights {
            alpha: args.alpha.unwrap_or(defaults.alpha),
            beta: args.beta.unwrap_or(defaults.beta),
            gamma: args.gamma.unwrap_or(defaults.gamma),
        };
        weights.validate().map_err(|e| usage(e.to_string()))?;
        if weights.alpha > 0.0 && args.content.is_none() {
            return Err(usage("--alpha > 0 requires --content"));
        }
        let init = args.init.unwrap_or_default();
        if init == Init::Content && args.content.is_none() {
            return Err(usage("--init content requires --content"));
        }
        let mut layers = LayerSets::default();
        if let Some(s) = &args.style_layers {
            layers.style = parse_layers("style-layers", s)?;
        }
        if let Some(s) = &args.content_layers {
            layers.content = parse_layers("content-layers", s)?;
        }
        let d = OptConfig::default();
        let opt = OptConfig {
            method: args.method.unwrap_or(d.method),
            iterations: args.iters.unwrap_or(d.iterations),
            lbfgs_history: args.lbfgs_history.unwrap_or(d.lbfgs_history),
            lbfgs_step: args.lbfgs_step.unwrap_or(d.lbfgs_step),
            lbfgs_inner: args.lbfgs_inner.unwrap_or(d.lbfgs_inner),
            adam_lr: args.adam_lr.unwrap_or(d.adam_lr),
            log_every: args.log_every.unwrap_or(d.log_every),
            ..d
        };
        opt.validate().map_err(|e| usage(e.to_string()))?;
        let gl = gramophone_core::dsp::GriffinLimConfig::default();
        Ok(Self {
            content: args.content,
            styles: args.styles,
            weights,
            layers,
            orientation: args.orientation.unwrap_or(Orientation::FreqChannels1d),
            kernel_width: args.kernel_width.unwrap_or(DEFAULT_KERNEL_WIDTH),
            channels: args.channels.unwrap_or(DEFAULT_CHANNELS),
            scaling: args.scaling.unwrap_or(Scaling::LinearStft),
            init,
            out_frames: args.out_frames,
            seed: args.seed.unwrap_or(0),
            opt,
            gl_iters: args.gl_iters.unwrap_or(gl.iters),
            gl_momentum: args.gl_momentum.unwrap_or(gl.momentum),
            weights_path: args.weights,
            output_dir: args.out.unwrap_or_else(|| PathBuf::from("out")),
            png_export: !args.no_png,
            trace_export: !args.no_trace,
        })
    }

    fn job(&self) -> Result<SynthJob, CliError> {
        let styles = self.styles.iter().map(load_wav).collect::<Result<Vec<_>, _>>()?;
        let content = self.content.as_ref().map(load_wav).transpose()?;
        let network = self.weights_path.as_ref().map(read_weights).transpose()?.map(Arc::new);
        let orientation = match &network {
            Some(net) => net.orientation(),
            None => self.orientation,
        };
        let mut job = SynthJob::texture(styles[0].clone());
        job.styles = styles;
        job.content = content;
        job.weights = self.weights;
        job.layers = self.layers.clone();
        job.orientation = orientation;
        job.kernel_width = self.kernel_width;
        job.channels = self.channels;
        job.scaling = self.scaling;
        job.init = self.init;
        job.out_frames = self.out_frames;
        job.seed = self.seed;
        job.opt = self.opt;
        job.gl_iters = self.gl_iters;
        job.gl_momentum = self.gl_momentum;
        job.network = network;
        Ok(job)
    }
}

pub fn parse_args<I, T>(argv: I) -> Result<CliConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv).map_err(CliError::Clap)?;
    CliConfig::from_args(args)
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Config-format echo of the run; feeding it back via --config reproduces it.
pub fn metadata_text(cfg: &CliConfig, result: &SynthResult) -> String {
    let mut out = String::from("# gramophone run\n");
    for s in &cfg.styles {
        out += &format!("style = {}\n", absolute(s).display());
    }
    if let Some(c) = &cfg.content {
        out += &format!("content = {}\n", absolute(c).display());
    }
    if let Some(w) = &cfg.weights_path {
        out += &format!("weights = {}\n", absolute(w).display());
    }
    for (k, v) in &result.metadata.settings {
        out += &format!("{k} = {v}\n");
    }
    out += &format!("png = {}\ntrace = {}\n", cfg.png_export, cfg.trace_export);
    for (k, v) in &result.metadata.derived {
        out += &format!("# {k}: {v}\n");
    }
    out
}

pub fn run(cfg: &CliConfig) -> Result<SynthResult, CliError> {
    let job = cfg.job()?;
    let result = run_job(&job)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_wav(dir.join("out.wav"), &result.audio)?;
    if cfg.png_export {
        write_png(dir.join("out.png"), &result.spectrogram.pixels)?;
        for (i, s) in result.prepared.styles.iter().enumerate() {
            write_png(dir.join(format!("style_{i}.png")), &s.pixels)?;
        }
        if let Some(c) = &result.prepared.content {
            write_png(dir.join("content.png"), &c.pixels)?;
        }
    }
    if cfg.trace_export {
        let mut f = fs::File::create(dir.join("trace.csv"))?;
        result.trace.write_csv(&mut f)?;
        f.flush()?;
    }
    fs::write(dir.join("metadata.cfg"), metadata_text(cfg, &result))?;
    Ok(result)
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match parse_args(argv) {
        Ok(c) => c,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    match run(&cfg) {
        Ok(r) => {
            println!(
                "wrote {} ({:.2}s, loss {:.4e} -> {:.4e}, spectral convergence {:.4})",
                cfg.output_dir.join("out.wav").display(),
                r.audio.duration_secs(),
                r.trace.initial.total,
                r.trace.last.total,
                r.spectral_convergence
            );
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
