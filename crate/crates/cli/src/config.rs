//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use hgsr_core::arch::{ModelConfig, Variant};
use hgsr_core::data::DEFAULT_PATCHES_PER_IMAGE;
use hgsr_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
}

/// Everything a training run needs, with file values already applied.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub patches_per_image: usize,
    pub output: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    train_scales_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: None,
            patches_per_image: DEFAULT_PATCHES_PER_IMAGE,
            output: PathBuf::from("hgsr.ckpt"),
            log: None,
            resume: None,
            train_scales_set: false,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| "not a valid number".to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.trim().to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value, base).map_err(|reason| match reason {
                SetError::Unknown => ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                },
                SetError::Invalid(reason) => ConfigError::Value {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                },
            })?;
        }
        if !cfg.train_scales_set {
            cfg.train.scales = cfg.model.branch_scales();
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), SetError> {
        let path = |v: &str| base.join(v);
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "base_channels" => m.base_channels = num(v)?,
            "num_hgb" => m.num_hgb = num(v)?,
            "scales" => m.scales = list(v)?,
            "controller" => m.controller = num(v)?,
            "variant" => m.variant = v.parse::<Variant>().map_err(|e| e.to_string())?,
            "image_channels" => m.image_channels = num(v)?,
            "anchors" => {
                m.enhancement_anchors = match list::<usize>(v)?.as_slice() {
                    [] => None,
                    [a, b] => Some((*a, *b)),
                    _ => return Err(SetError::Invalid("expected two block indices `a,b`".into())),
                }
            }
            "lr0" => t.lr0 = num(v)?,
            "anchor_step" => t.anchor_step = num(v)?,
            "halving_period" => t.halving_period = num(v)?,
            "batch" => t.batch = num(v)?,
            "beta1" => t.beta1 = num(v)?,
            "beta2" => t.beta2 = num(v)?,
            "epsilon" => t.epsilon = num(v)?,
            "max_steps" => t.max_steps = num(v)?,
            "seed" => t.seed = num(v)?,
            "patch_size" => t.patch_size = num(v)?,
            "train_scales" => {
                t.scales = list(v)?;
                self.train_scales_set = true;
            }
            "checkpoint_every" => t.checkpoint_every = num(v)?,
            "augment" => t.augment = boolean(v)?,
            "dataset" => self.dataset = Some(path(v)),
            "patches_per_image" => self.patches_per_image = num(v)?,
            "output" => self.output = path(v),
            "log" => self.log = Some(path(v)),
            "resume" => self.resume = (!v.is_empty()).then(|| path(v)),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Resolved configuration as `key = value` lines.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let anchors = m.enhancement_anchors.map(|(a, b)| format!("{a},{b}")).unwrap_or_default();
        let mut lines = vec![
            format!("base_channels = {}", m.base_channels),
            format!("num_hgb = {}", m.num_hgb),
            format!("scales = {}", join(&m.scales)),
            format!("controller = {}", m.controller),
            format!("variant = {}", m.variant),
            format!("image_channels = {}", m.image_channels),
            format!("anchors = {anchors}"),
            format!("lr0 = {:?}", t.lr0),
            format!("anchor_step = {}", t.anchor_step),
            format!("halving_period = {}", t.halving_period),
            format!("batch = {}", t.batch),
            format!("beta1 = {:?}", t.beta1),
            format!("beta2 = {:?}", t.beta2),
            format!("epsilon = {:?}", t.epsilon),
            format!("max_steps = {}", t.max_steps),
            format!("seed = {}", t.seed),
            format!("patch_size = {}", t.patch_size),
            format!("train_scales = {}", join(&t.scales)),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("augment = {}", t.augment),
            format!("dataset = {}", opt(&self.dataset)),
            format!("patches_per_image = {}", self.patches_per_image),
            format!("output = {}", self.output.display()),
            format!("log = {}", opt(&self.log)),
            format!("resume = {}", opt(&self.resume)),
        ];
        lines.iter_mut().for_each(|l| l.push('\n'));
        lines.concat()
    }
}

enum SetError {
    Unknown,
    Invalid(String),
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        SetError::Invalid(s)
    }
}
