//! Run configuration in a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! pooling = exact
//! app_channels = 8, 16, 16, 16
//! ```
//!
//! Unknown and repeated keys are rejected. Every key has a default, so an
//! empty file is a valid configuration. [`RunConfig::to_text`] writes every
//! key in a fixed order; [`RunConfig::config_hash`] is the SHA-256 of that
//! text with the path keys left out, so relocating a run does not change it.

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LayerwiseSpec, LossWeights, TripletSpec};
use crate::pooling::PoolingMode;
use crate::streams::{ConvSpec, StreamConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const CONFIG_HASH_FILE: &str = "config.sha256";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub image_height: usize,
    pub image_width: usize,
    pub conv_kernel: usize,
    pub app_channels: Vec<usize>,
    pub app_strides: Vec<usize>,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub paf_stages: usize,
    pub conf_stages: usize,
    pub paf_channels: usize,
    pub conf_channels: usize,
    pub stage_hidden: usize,
    pub stage_kernel: usize,

    pub pooling: PoolingMode,
    pub sketch_dim: usize,
    pub sketch_seed: u64,

    pub margin: f64,
    pub lambda_id: f64,
    /// Weight of each layer-wise term; 0 disables the layer-wise loss.
    pub lambda_layer: f64,
    pub taps: Vec<usize>,
    pub tap_dim: usize,

    pub learning_rate: f64,
    pub steps: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub freeze_part: bool,

    pub manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_height: 64,
            image_width: 32,
            conv_kernel: 3,
            app_channels: vec![8, 16, 16, 16],
            app_strides: vec![2, 2, 2, 1],
            backbone_channels: vec![16, 16, 16],
            backbone_strides: vec![2, 2, 2],
            paf_stages: 2,
            conf_stages: 1,
            paf_channels: 8,
            conf_channels: 8,
            stage_hidden: 16,
            stage_kernel: 3,
            pooling: PoolingMode::Exact,
            sketch_dim: 512,
            sketch_seed: 0,
            margin: 0.3,
            lambda_id: 0.0,
            lambda_layer: 0.0,
            taps: vec![1, 2],
            tap_dim: 32,
            learning_rate: 1e-5,
            steps: 500,
            batch_p: 8,
            batch_k: 4,
            freeze_part: false,
            manifest: None,
            eval_manifest: None,
            out_dir: None,
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_scalar(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

const PATH_KEYS: [&str; 3] = ["manifest", "eval_manifest", "out_dir"];

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_scalar(key, v)?,
            "image_height" => self.image_height = parse_scalar(key, v)?,
            "image_width" => self.image_width = parse_scalar(key, v)?,
            "conv_kernel" => self.conv_kernel = parse_scalar(key, v)?,
            "app_channels" => self.app_channels = parse_list(key, v)?,
            "app_strides" => self.app_strides = parse_list(key, v)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, v)?,
            "backbone_strides" => self.backbone_strides = parse_list(key, v)?,
            "paf_stages" => self.paf_stages = parse_scalar(key, v)?,
            "conf_stages" => self.conf_stages = parse_scalar(key, v)?,
            "paf_channels" => self.paf_channels = parse_scalar(key, v)?,
            "conf_channels" => self.conf_channels = parse_scalar(key, v)?,
            "stage_hidden" => self.stage_hidden = parse_scalar(key, v)?,
            "stage_kernel" => self.stage_kernel = parse_scalar(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "sketch_dim" => self.sketch_dim = parse_scalar(key, v)?,
            "sketch_seed" => self.sketch_seed = parse_scalar(key, v)?,
            "margin" => self.margin = parse_scalar(key, v)?,
            "lambda_id" => self.lambda_id = parse_scalar(key, v)?,
            "lambda_layer" => self.lambda_layer = parse_scalar(key, v)?,
            "taps" => self.taps = parse_list(key, v)?,
            "tap_dim" => self.tap_dim = parse_scalar(key, v)?,
            "learning_rate" => self.learning_rate = parse_scalar(key, v)?,
            "steps" => self.steps = parse_scalar(key, v)?,
            "batch_p" => self.batch_p = parse_scalar(key, v)?,
            "batch_k" => self.batch_k = parse_scalar(key, v)?,
            "freeze_part" => self.freeze_part = parse_scalar(key, v)?,
            "manifest" => self.manifest = opt_path(v),
            "eval_manifest" => self.eval_manifest = opt_path(v),
            "out_dir" => self.out_dir = opt_path(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("app_channels", join(&self.app_channels)),
            ("app_strides", join(&self.app_strides)),
            ("backbone_channels", join(&self.backbone_channels)),
            ("backbone_strides", join(&self.backbone_strides)),
            ("paf_stages", self.paf_stages.to_string()),
            ("conf_stages", self.conf_stages.to_string()),
            ("paf_channels", self.paf_channels.to_string()),
            ("conf_channels", self.conf_channels.to_string()),
            ("stage_hidden", self.stage_hidden.to_string()),
            ("stage_kernel", self.stage_kernel.to_string()),
            ("pooling", self.pooling.to_string()),
            ("sketch_dim", self.sketch_dim.to_string()),
            ("sketch_seed", self.sketch_seed.to_string()),
            ("margin", self.margin.to_string()),
            ("lambda_id", self.lambda_id.to_string()),
            ("lambda_layer", self.lambda_layer.to_string()),
            ("taps", join(&self.taps)),
            ("tap_dim", self.tap_dim.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_p", self.batch_p.to_string()),
            ("batch_k", self.batch_k.to_string()),
            ("freeze_part", self.freeze_part.to_string()),
            ("manifest", show_path(&self.manifest)),
            ("eval_manifest", show_path(&self.eval_manifest)),
            ("out_dir", show_path(&self.out_dir)),
        ]
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 over the canonical text without path keys.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if !PATH_KEYS.contains(&k) {
                hasher.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Writes the resolved config and its hash into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CONFIG_HASH_FILE);
        fs::write(&path, format!("{}\n", self.config_hash())).map_err(|e| Error::io(&path, e))
    }

    pub fn stream_config(&self) -> Result<StreamConfig> {
        if self.app_channels.len() != self.app_strides.len()
            || self.backbone_channels.len() != self.backbone_strides.len()
        {
            return Err(Error::Config("channel and stride lists must have equal lengths".into()));
        }
        let k = self.conv_kernel;
        let layers = |channels: &[usize], strides: &[usize]| -> Vec<ConvSpec> {
            channels
                .iter()
                .zip(strides)
                .map(|(&c, &s)| ConvSpec::new(c, k, s, k / 2))
                .collect()
        };
        let config = StreamConfig {
            input_shape: (3, self.image_height, self.image_width),
            appearance_layers: layers(&self.app_channels, &self.app_strides),
            backbone_layers: layers(&self.backbone_channels, &self.backbone_strides),
            paf_stages: self.paf_stages,
            conf_stages: self.conf_stages,
            paf_channels: self.paf_channels,
            conf_channels: self.conf_channels,
            stage_hidden: self.stage_hidden,
            stage_kernel: self.stage_kernel,
            tap_layers: if self.layerwise_enabled() {
                self.taps.clone()
            } else {
                Vec::new()
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn layerwise_enabled(&self) -> bool {
        self.lambda_layer != 0.0 && !self.taps.is_empty()
    }

    pub fn triplet_spec(&self) -> Result<TripletSpec> {
        TripletSpec::new(self.margin)
    }

    pub fn layerwise_spec(&self) -> LayerwiseSpec {
        let taps = if self.layerwise_enabled() { self.taps.len() } else { 0 };
        LayerwiseSpec::uniform(taps, self.tap_dim, self.lambda_layer)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_id: self.lambda_id,
            layer: self.layerwise_spec().weights,
        }
    }

    /// Checks everything that does not need the file system.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.stream_config() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.triplet_spec() {
            problems.push(e.to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.steps < 1 {
            problems.push("steps must be at least 1".into());
        }
        if self.batch_p < 1 || self.batch_k < 1 {
            problems.push(format!(
                "batch_p and batch_k must be positive, got {}×{}",
                self.batch_p, self.batch_k
            ));
        }
        if !(self.lambda_id >= 0.0 && self.lambda_layer >= 0.0) {
            problems.push("loss weights must be non-negative".into());
        }
        if self.layerwise_enabled() && self.tap_dim == 0 {
            problems.push("tap_dim must be positive".into());
        }
        if self.pooling == PoolingMode::Compact && self.sketch_dim == 0 {
            problems.push("sketch_dim must be positive".into());
        }
        match problems.len() {
            0 => Ok(()),
            1 => Err(Error::Config(problems.remove(0))),
            _ => Err(Error::Validation(problems)),
        }
    }
}
