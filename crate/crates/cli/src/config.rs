//! The merged run configuration: dataset, pretraining, loss, augmentation,
//! backbone and fine-tuning knobs plus the output directory, as one flat
//! key=value namespace. A config file sets keys, command-line flags
//! override them, and the fully resolved result is written beside every
//! run's outputs so any run can be replayed from its own artifacts.

use std::path::{Path, PathBuf};

use hico_core::data::DatasetManifest;
use hico_core::eval::{FinetuneConfig, TrainableScope};
use hico_core::losses::SmoothDenominator;
use hico_core::trainer::{PretrainConfig, TermToggles, TrainMode};
use hico_core::{wire, Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub manifest: DatasetManifest,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            manifest: DatasetManifest::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Every legal config key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "videos",
    "classes",
    "frames",
    "size",
    "freq_lo",
    "freq_hi",
    "texture_amp",
    "noise_sigma",
    "mode",
    "toggles",
    "epochs",
    "batch",
    "lr",
    "weight_decay",
    "decoupled",
    "label_rate",
    "checkpoint_every",
    "tau",
    "lambda",
    "alpha",
    "beta",
    "smooth_denom",
    "crop_lo",
    "crop_hi",
    "flip_prob",
    "brightness",
    "contrast_lo",
    "contrast_hi",
    "stem_channels",
    "stage_channels",
    "fpn_channels",
    "embed_dim",
    "stem_downsample",
    "head_relu",
    "ft_lr",
    "ft_weight_decay",
    "ft_epochs",
    "ft_batch",
    "scope",
    "folds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::ConfigError(format!("cannot parse {key}={value}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::ConfigError(format!("{key} must be true or false, got {other}"))),
    }
}

impl RunConfig {
    /// Set one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pretrain;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "videos" => self.manifest.num_videos = parse(key, value)?,
            "classes" => self.manifest.num_classes = parse(key, value)?,
            "frames" => self.manifest.frames_per_video = parse(key, value)?,
            "size" => self.manifest.image_size = parse(key, value)?,
            "freq_lo" => self.manifest.gen.freq_lo = parse(key, value)?,
            "freq_hi" => self.manifest.gen.freq_hi = parse(key, value)?,
            "texture_amp" => self.manifest.gen.texture_amp = parse(key, value)?,
            "noise_sigma" => self.manifest.gen.noise_sigma = parse(key, value)?,
            "mode" => p.mode = TrainMode::parse(value.trim())?,
            "toggles" => p.toggles = TermToggles::parse(value.trim())?,
            "epochs" => p.epochs = parse(key, value)?,
            "batch" => p.batch_size = parse(key, value)?,
            "lr" => p.lr = parse(key, value)?,
            "weight_decay" => p.weight_decay = parse(key, value)?,
            "decoupled" => p.decoupled_weight_decay = parse_bool(key, value)?,
            "label_rate" => p.label_rate = parse(key, value)?,
            "checkpoint_every" => p.checkpoint_every = parse(key, value)?,
            "tau" => p.weights.tau = parse(key, value)?,
            "lambda" => p.weights.lambda = parse(key, value)?,
            "alpha" => p.weights.alpha = parse(key, value)?,
            "beta" => p.weights.beta = parse(key, value)?,
            "smooth_denom" => {
                p.weights.smooth_denominator = match value.trim() {
                    "batch" => SmoothDenominator::BatchMinusOne,
                    "classes" => SmoothDenominator::ClassesMinusOne,
                    other => {
                        return Err(Error::ConfigError(format!(
                            "smooth_denom must be batch or classes, got {other}"
                        )))
                    }
                }
            }
            "crop_lo" => p.augment.crop_scale.0 = parse(key, value)?,
            "crop_hi" => p.augment.crop_scale.1 = parse(key, value)?,
            "flip_prob" => p.augment.flip_prob = parse(key, value)?,
            "brightness" => p.augment.brightness_jitter = parse(key, value)?,
            "contrast_lo" => p.augment.contrast_range.0 = parse(key, value)?,
            "contrast_hi" => p.augment.contrast_range.1 = parse(key, value)?,
            "stem_channels" => p.backbone.stem_channels = parse(key, value)?,
            "stage_channels" => {
                let parts: Vec<&str> = value.trim().split(',').collect();
                if parts.len() != 4 {
                    return Err(Error::ConfigError(format!(
                        "stage_channels needs 4 comma-separated values, got {value}"
                    )));
                }
                for (i, part) in parts.iter().enumerate() {
                    p.backbone.stage_channels[i] = parse(key, part)?;
                }
            }
            "fpn_channels" => p.backbone.fpn_channels = parse(key, value)?,
            "embed_dim" => p.backbone.embed_dim = parse(key, value)?,
            "stem_downsample" => p.backbone.stem_downsample = parse_bool(key, value)?,
            "head_relu" => p.backbone.head_relu = parse_bool(key, value)?,
            "ft_lr" => self.finetune.lr = parse(key, value)?,
            "ft_weight_decay" => self.finetune.weight_decay = parse(key, value)?,
            "ft_epochs" => self.finetune.epochs = parse(key, value)?,
            "ft_batch" => self.finetune.batch_size = parse(key, value)?,
            "scope" => self.finetune.scope = TrainableScope::parse(value.trim())?,
            "folds" => self.finetune.folds = parse(key, value)?,
            other => return Err(Error::ConfigError(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Apply a key=value config file. Blank lines and '#' comments are
    /// skipped; duplicate keys are rejected.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::ConfigError(format!("config line {} is not key=value: {line}", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::ConfigError(format!("duplicate config key {key}")));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Apply repeatable `--set key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::ConfigError(format!("--set expects key=value, got {pair}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Mirror the single seed into every subsystem and derive the backbone
    /// geometry from the dataset keys. Called once after all overrides.
    pub fn resolve(&mut self) {
        self.manifest.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.pretrain.backbone.in_channels = 1;
        self.pretrain.backbone.input_hw = self.manifest.image_size;
        self.pretrain.backbone.num_classes = self.manifest.num_classes;
    }

    /// Adopt the geometry of a dataset read from disk, so the resolved
    /// config records what actually ran.
    pub fn align_to_dataset(&mut self, m: &DatasetManifest) {
        self.manifest = m.clone();
        self.pretrain.backbone.input_hw = m.image_size;
        self.pretrain.backbone.num_classes = m.num_classes;
    }

    /// Full key=value dump, one key per line in `KEYS` order. Reloading the
    /// text reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let p = &self.pretrain;
        let g = &self.manifest.gen;
        let b = &p.backbone;
        let a = &p.augment;
        let mut s = String::new();
        for key in KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "out" => self.out.display().to_string(),
                "videos" => self.manifest.num_videos.to_string(),
                "classes" => self.manifest.num_classes.to_string(),
                "frames" => self.manifest.frames_per_video.to_string(),
                "size" => self.manifest.image_size.to_string(),
                "freq_lo" => format!("{:?}", g.freq_lo),
                "freq_hi" => format!("{:?}", g.freq_hi),
                "texture_amp" => format!("{:?}", g.texture_amp),
                "noise_sigma" => format!("{:?}", g.noise_sigma),
                "mode" => p.mode.as_str().to_string(),
                "toggles" => p.toggles.label(),
                "epochs" => p.epochs.to_string(),
                "batch" => p.batch_size.to_string(),
                "lr" => format!("{:?}", p.lr),
                "weight_decay" => format!("{:?}", p.weight_decay),
                "decoupled" => p.decoupled_weight_decay.to_string(),
                "label_rate" => format!("{:?}", p.label_rate),
                "checkpoint_every" => p.checkpoint_every.to_string(),
                "tau" => format!("{:?}", p.weights.tau),
                "lambda" => format!("{:?}", p.weights.lambda),
                "alpha" => format!("{:?}", p.weights.alpha),
                "beta" => format!("{:?}", p.weights.beta),
                "smooth_denom" => match p.weights.smooth_denominator {
                    SmoothDenominator::BatchMinusOne => "batch".into(),
                    SmoothDenominator::ClassesMinusOne => "classes".into(),
                },
                "crop_lo" => format!("{:?}", a.crop_scale.0),
                "crop_hi" => format!("{:?}", a.crop_scale.1),
                "flip_prob" => format!("{:?}", a.flip_prob),
                "brightness" => format!("{:?}", a.brightness_jitter),
                "contrast_lo" => format!("{:?}", a.contrast_range.0),
                "contrast_hi" => format!("{:?}", a.contrast_range.1),
                "stem_channels" => b.stem_channels.to_string(),
                "stage_channels" => {
                    let c = b.stage_channels;
                    format!("{},{},{},{}", c[0], c[1], c[2], c[3])
                }
                "fpn_channels" => b.fpn_channels.to_string(),
                "embed_dim" => b.embed_dim.to_string(),
                "stem_downsample" => b.stem_downsample.to_string(),
                "head_relu" => b.head_relu.to_string(),
                "ft_lr" => format!("{:?}", self.finetune.lr),
                "ft_weight_decay" => format!("{:?}", self.finetune.weight_decay),
                "ft_epochs" => self.finetune.epochs.to_string(),
                "ft_batch" => self.finetune.batch_size.to_string(),
                "scope" => self.finetune.scope.as_str().to_string(),
                "folds" => self.finetune.folds.to_string(),
                other => unreachable!("key {other} listed but not rendered"),
            };
            s.push_str(key);
            s.push('=');
            s.push_str(&value);
            s.push('\n');
        }
        s
    }

    /// Write the resolved config into the output directory.
    pub fn persist(&self) -> Result<()> {
        wire::atomic_write(&self.out.join("resolved.cfg"), self.to_text().as_bytes())
    }
}

/// Worker thread cap from HICO_THREADS; unset means 1 (fully serial and
/// deterministic by construction rather than by slot discipline).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("HICO_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::ConfigError(format!("HICO_THREADS must be a positive integer, got {s}")))?;
            if n == 0 {
                return Err(Error::ConfigError("HICO_THREADS must be at least 1".into()));
            }
            Ok(n)
        }
    }
}
