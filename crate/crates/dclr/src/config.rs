//! Run configuration: line-oriented `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. [`RunConfig::render`] writes every key, so its output is
//! the fully resolved configuration of a run and parses back to the same
//! value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dclr_core::augment::{Policy, Transform, TransformSpec};
use dclr_core::convcrf::{CrfConfig, KernelSpec};
use dclr_core::datagen::SynthParams;
use dclr_core::encoder::{DUNetConfig, ProjectionConfig};
use dclr_core::pipeline::{Monitor, PretrainConfig, DEFAULT_BACKGROUND_THRESHOLD, LABEL_RATIO};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 uses the machine's parallelism.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatagenSection {
    pub n_slides: usize,
    pub side: usize,
    pub n_blobs: usize,
    pub separation: f32,
    pub noise: f32,
    pub margin: f32,
    pub blob_radius_min: f32,
    pub blob_radius_max: f32,
    pub lobes: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub depth: usize,
    pub base_channels: usize,
    pub input_side: usize,
    pub embed_dim: usize,
    pub extra_bottleneck_conv: bool,
    pub hidden_dim: usize,
    pub proj_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSection {
    pub temperature: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub lr: f32,
    pub momentum: f32,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub monitor: Monitor,
    pub chunk_size: usize,
    /// Tiling stride for training patches.
    pub stride: usize,
    /// Evenly spaced subsample of the training patches; 0 keeps all.
    pub max_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSection {
    pub background_threshold: f32,
    /// Tiling stride when segmenting.
    pub stride: usize,
    pub kmeans_restarts: usize,
    pub label_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfSection {
    pub filter_size: usize,
    pub iterations: usize,
    pub spatial_theta: f32,
    pub spatial_weight: f32,
    pub bilateral_theta_xy: f32,
    pub bilateral_theta_rgb: f32,
    pub bilateral_weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub datagen: DatagenSection,
    pub augment: Policy,
    pub encoder: EncoderSection,
    pub contrastive: ContrastiveSection,
    pub pretrain: PretrainSection,
    pub pipeline: PipelineSection,
    pub crf: CrfSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthParams::separable(0);
        let unet = DUNetConfig::default();
        let proj = ProjectionConfig::default();
        let pre = PretrainConfig::default();
        let crf = CrfConfig::default();
        let [spatial, bilateral] = default_kernels();
        RunConfig {
            run: RunSection { seed: 0, threads: 0 },
            datagen: DatagenSection {
                n_slides: 20,
                side: synth.side,
                n_blobs: synth.n_blobs,
                separation: synth.separation,
                noise: synth.noise,
                margin: synth.margin,
                blob_radius_min: synth.blob_radius.0,
                blob_radius_max: synth.blob_radius.1,
                lobes: synth.lobes,
                train_fraction: 0.8,
            },
            augment: Policy::default(),
            encoder: EncoderSection {
                depth: unet.depth,
                base_channels: unet.base_channels,
                input_side: unet.input_side,
                embed_dim: unet.embed_dim,
                extra_bottleneck_conv: unet.extra_bottleneck_conv,
                hidden_dim: proj.hidden_dim,
                proj_dim: proj.proj_dim,
            },
            contrastive: ContrastiveSection {
                temperature: pre.temperature,
                batch_size: pre.batch_size,
            },
            pretrain: PretrainSection {
                lr: pre.lr,
                momentum: pre.momentum,
                patience: pre.patience,
                max_epochs: pre.max_epochs,
                validation_fraction: pre.validation_fraction,
                monitor: pre.monitor,
                chunk_size: pre.chunk_size,
                stride: unet.input_side,
                max_patches: 0,
            },
            pipeline: PipelineSection {
                background_threshold: DEFAULT_BACKGROUND_THRESHOLD,
                stride: unet.input_side / 2,
                kmeans_restarts: 8,
                label_ratio: LABEL_RATIO,
            },
            crf: CrfSection {
                filter_size: crf.filter_size,
                iterations: crf.iterations,
                spatial_theta: spatial.theta[0],
                spatial_weight: spatial.weight,
                bilateral_theta_xy: bilateral.theta[0],
                bilateral_theta_rgb: bilateral.theta[2],
                bilateral_weight: bilateral.weight,
            },
        }
    }
}

fn default_kernels() -> [KernelSpec; 2] {
    let mut specs = dclr_core::convcrf::default_specs().into_iter();
    let spatial = specs.next().expect("two default kernels");
    let bilateral = specs.next().expect("two default kernels");
    [spatial, bilateral]
}

/// Text form of one configuration value.
trait Value: Sized {
    fn parse(text: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(text: &str) -> std::result::Result<Self, String> {
                text.parse().map_err(|e| format!("cannot parse {text:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u64, usize, f32, f64, bool);

impl Value for Monitor {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        match text {
            "validation-loss" => Ok(Monitor::ValidationLoss),
            "validation-accuracy" => Ok(Monitor::ValidationAccuracy),
            _ => Err(format!("unknown monitor {text:?} (validation-loss | validation-accuracy)")),
        }
    }
    fn render(&self) -> String {
        match self {
            Monitor::ValidationLoss => "validation-loss".into(),
            Monitor::ValidationAccuracy => "validation-accuracy".into(),
        }
    }
}

impl Value for Policy {
    /// `kind p=<prob> [param=<value> ...]` entries separated by `;`, e.g.
    /// `horizontal-flip p=0.5; cutout p=0.5 side_fraction=0.25`.
    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut transforms = Vec::new();
        for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            transforms.push(parse_transform(entry)?);
        }
        let policy = Policy { transforms };
        policy.validate().map_err(|e| e.to_string())?;
        Ok(policy)
    }

    fn render(&self) -> String {
        let entries: Vec<String> = self
            .transforms
            .iter()
            .map(|s| {
                let mut e = format!("{} p={}", s.transform.name(), s.probability);
                match s.transform {
                    Transform::ResizedCrop { min_scale, max_scale } => {
                        let _ = write!(e, " min_scale={min_scale} max_scale={max_scale}");
                    }
                    Transform::Cutout { side_fraction } => {
                        let _ = write!(e, " side_fraction={side_fraction}");
                    }
                    Transform::ColourJitter { strength } => {
                        let _ = write!(e, " strength={strength}");
                    }
                    Transform::GaussianBlur { min_sigma, max_sigma } => {
                        let _ = write!(e, " min_sigma={min_sigma} max_sigma={max_sigma}");
                    }
                    Transform::HorizontalFlip | Transform::ColourDrop | Transform::Sobel => {}
                }
                e
            })
            .collect();
        entries.join("; ")
    }
}

fn parse_transform(entry: &str) -> std::result::Result<TransformSpec, String> {
    let mut tokens = entry.split_whitespace();
    let kind = tokens.next().ok_or("empty transform entry")?;
    let mut args: Vec<(&str, f32)> = Vec::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
        let v: f32 = v.parse().map_err(|_| format!("bad number {v:?} for {k} in {kind}"))?;
        if args.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("{k} given twice for {kind}"));
        }
        args.push((k, v));
    }
    let mut take = |name: &str, default: Option<f32>| -> std::result::Result<f32, String> {
        match args.iter().position(|(k, _)| *k == name) {
            Some(i) => Ok(args.remove(i).1),
            None => default.ok_or_else(|| format!("{kind} needs {name}=")),
        }
    };
    let probability = take("p", Some(1.0))?;
    let transform = match kind {
        "resized-crop" => Transform::ResizedCrop {
            min_scale: take("min_scale", None)?,
            max_scale: take("max_scale", None)?,
        },
        "horizontal-flip" => Transform::HorizontalFlip,
        "cutout" => Transform::Cutout {
            side_fraction: take("side_fraction", None)?,
        },
        "colour-jitter" => Transform::ColourJitter {
            strength: take("strength", None)?,
        },
        "colour-drop" => Transform::ColourDrop,
        "gaussian-blur" => Transform::GaussianBlur {
            min_sigma: take("min_sigma", None)?,
            max_sigma: take("max_sigma", None)?,
        },
        "sobel" => Transform::Sobel,
        other => return Err(format!("unknown transform {other:?}")),
    };
    if let Some((k, _)) = args.first() {
        return Err(format!("unknown parameter {k} for {kind}"));
    }
    TransformSpec::new(transform, probability).map_err(|e| e.to_string())
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in rendering order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            fn set(&mut self, key: &str, text: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => self.$($field).+ = Value::parse(text)?,)*
                    _ => return Err(format!("unknown key {key}")),
                }
                Ok(())
            }

            /// Fully resolved configuration, one `key = value` line per key.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", $key, Value::render(&self.$($field).+));)*
                out
            }
        }
    };
}

keys! {
    "run.seed" => run.seed;
    "run.threads" => run.threads;
    "datagen.n_slides" => datagen.n_slides;
    "datagen.side" => datagen.side;
    "datagen.n_blobs" => datagen.n_blobs;
    "datagen.separation" => datagen.separation;
    "datagen.noise" => datagen.noise;
    "datagen.margin" => datagen.margin;
    "datagen.blob_radius_min" => datagen.blob_radius_min;
    "datagen.blob_radius_max" => datagen.blob_radius_max;
    "datagen.lobes" => datagen.lobes;
    "datagen.train_fraction" => datagen.train_fraction;
    "augment.policy" => augment;
    "encoder.depth" => encoder.depth;
    "encoder.base_channels" => encoder.base_channels;
    "encoder.input_side" => encoder.input_side;
    "encoder.embed_dim" => encoder.embed_dim;
    "encoder.extra_bottleneck_conv" => encoder.extra_bottleneck_conv;
    "encoder.hidden_dim" => encoder.hidden_dim;
    "encoder.proj_dim" => encoder.proj_dim;
    "contrastive.temperature" => contrastive.temperature;
    "contrastive.batch_size" => contrastive.batch_size;
    "pretrain.lr" => pretrain.lr;
    "pretrain.momentum" => pretrain.momentum;
    "pretrain.patience" => pretrain.patience;
    "pretrain.max_epochs" => pretrain.max_epochs;
    "pretrain.validation_fraction" => pretrain.validation_fraction;
    "pretrain.monitor" => pretrain.monitor;
    "pretrain.chunk_size" => pretrain.chunk_size;
    "pretrain.stride" => pretrain.stride;
    "pretrain.max_patches" => pretrain.max_patches;
    "pipeline.background_threshold" => pipeline.background_threshold;
    "pipeline.stride" => pipeline.stride;
    "pipeline.kmeans_restarts" => pipeline.kmeans_restarts;
    "pipeline.label_ratio" => pipeline.label_ratio;
    "crf.filter_size" => crf.filter_size;
    "crf.iterations" => crf.iterations;
    "crf.spatial_theta" => crf.spatial_theta;
    "crf.spatial_weight" => crf.spatial_weight;
    "crf.bilateral_theta_xy" => crf.bilateral_theta_xy;
    "crf.bilateral_theta_rgb" => crf.bilateral_theta_rgb;
    "crf.bilateral_weight" => crf.bilateral_weight;
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`; `origin` names the source
    /// in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = || format!("{origin}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(at(), format!("expected `section.key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::config(at(), format!("key {key} given twice")));
            }
            cfg.set(key, value).map_err(|reason| Error::config(at(), reason))?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// File values (or defaults without a file), then flag overrides.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>, threads: Option<usize>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) if !p.exists() => {
                return Err(Error::MissingInput {
                    path: p.to_path_buf(),
                    what: "config file",
                })
            }
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.run.seed = s;
        }
        if let Some(t) = threads {
            cfg.run.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every derived core configuration.
    pub fn validate(&self) -> Result<()> {
        self.synth_params().validate()?;
        self.pretrain_config().validate()?;
        for spec in self.crf_specs() {
            spec.validate()?;
        }
        let bad = |key: &str, reason: &str| Err(Error::config(key.to_string(), reason.to_string()));
        if self.datagen.n_slides < 2 {
            return bad("datagen.n_slides", "at least two slides are needed for a split");
        }
        if self.crf.filter_size % 2 == 0 {
            return bad("crf.filter_size", "must be odd");
        }
        if self.crf.iterations == 0 {
            return bad("crf.iterations", "must be at least 1");
        }
        if !(self.pipeline.background_threshold > 0.0 && self.pipeline.background_threshold < 1.0) {
            return bad("pipeline.background_threshold", "must lie in (0, 1)");
        }
        if self.pipeline.stride == 0 || self.pretrain.stride == 0 {
            return bad("pipeline.stride", "strides must be at least 1");
        }
        if !(self.pipeline.label_ratio > 0.5 && self.pipeline.label_ratio <= 1.0) {
            return bad("pipeline.label_ratio", "must lie in (0.5, 1]");
        }
        Ok(())
    }

    pub fn synth_params(&self) -> SynthParams {
        let d = &self.datagen;
        SynthParams {
            side: d.side,
            n_blobs: d.n_blobs,
            separation: d.separation,
            noise: d.noise,
            margin: d.margin,
            blob_radius: (d.blob_radius_min, d.blob_radius_max),
            lobes: d.lobes,
            seed: self.run.seed,
        }
    }

    pub fn unet(&self) -> DUNetConfig {
        let e = &self.encoder;
        DUNetConfig {
            depth: e.depth,
            base_channels: e.base_channels,
            input_side: e.input_side,
            embed_dim: e.embed_dim,
            extra_bottleneck_conv: e.extra_bottleneck_conv,
        }
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            hidden_dim: self.encoder.hidden_dim,
            proj_dim: self.encoder.proj_dim,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            unet: self.unet(),
            projection: self.projection(),
            policy: self.augment.clone(),
            temperature: self.contrastive.temperature,
            lr: p.lr,
            momentum: p.momentum,
            batch_size: self.contrastive.batch_size,
            patience: p.patience,
            max_epochs: p.max_epochs,
            validation_fraction: p.validation_fraction,
            monitor: p.monitor,
            chunk_size: p.chunk_size,
            seed: self.run.seed,
        }
    }

    pub fn crf_config(&self) -> CrfConfig {
        CrfConfig {
            filter_size: self.crf.filter_size,
            iterations: self.crf.iterations,
        }
    }

    pub fn crf_specs(&self) -> Vec<KernelSpec> {
        let c = &self.crf;
        vec![
            KernelSpec::spatial(c.spatial_theta, c.spatial_weight),
            KernelSpec::bilateral(c.bilateral_theta_xy, c.bilateral_theta_rgb, c.bilateral_weight),
        ]
    }
}
