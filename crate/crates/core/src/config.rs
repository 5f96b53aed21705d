//! Run configuration: flat `section.key = value` text files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{FerError, Result};
use crate::inference::EnsembleConfig;
use crate::models::{Architecture, BackboneConfig, HeadKind, TemporalHeadConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames_root: PathBuf,
    pub annotations_root: PathBuf,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub head: TemporalHeadConfig,
    pub ensemble: EnsembleConfig,
    pub label_map: Option<PathBuf>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.head.validate()
    }

    /// Commands that read an existing dataset call this; `synth` does not,
    /// since it creates the paths itself.
    pub fn validate_input_paths(&self) -> Result<()> {
        for (name, p) in [
            ("paths.frames_root", &self.frames_root),
            ("paths.annotations_root", &self.annotations_root),
        ] {
            if !p.exists() {
                return Err(FerError::Config(format!("{name} does not exist: {p:?}")));
            }
        }
        if let Some(lm) = &self.label_map {
            if !lm.exists() {
                return Err(FerError::Config(format!("run.label_map does not exist: {lm:?}")));
            }
        }
        Ok(())
    }

    /// Echo the fully materialized config; re-parsing the result yields an
    /// identical RunConfig.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "paths.frames_root = {}", self.frames_root.display());
        let _ = writeln!(s, "paths.annotations_root = {}", self.annotations_root.display());
        let _ = writeln!(s, "paths.output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "train.base_lr = {}", self.train.base_lr);
        let _ = writeln!(s, "train.epochs = {}", self.train.epochs);
        let ms: Vec<String> = self.train.milestones.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(s, "train.milestones = {}", ms.join(","));
        let _ = writeln!(s, "train.lr_gamma = {}", self.train.lr_gamma);
        let _ = writeln!(
            s,
            "train.batch_size = {}",
            self.train.batch_size.map_or("auto".into(), |b| b.to_string())
        );
        let _ = writeln!(s, "train.seed = {}", self.train.seed);
        let _ = writeln!(s, "train.window_t = {}", self.train.window_t);
        let _ = writeln!(s, "train.window_stride = {}", self.train.window_stride);
        let _ = writeln!(s, "train.momentum = {}", self.train.momentum);
        let _ = writeln!(
            s,
            "train.grad_clip = {}",
            self.train.grad_clip.map_or("none".into(), |c| c.to_string())
        );
        let _ = writeln!(s, "backbone.architecture = {}", self.backbone.architecture);
        if let Some(p) = &self.backbone.pretrained_weights_path {
            let _ = writeln!(s, "backbone.pretrained_weights = {}", p.display());
        }
        let _ = writeln!(s, "head.kind = {}", self.head.kind);
        let _ = writeln!(s, "head.gru_layers = {}", self.head.gru_layers);
        let _ = writeln!(s, "head.gru_hidden = {}", self.head.gru_hidden);
        let _ = writeln!(s, "head.tf_model_dim = {}", self.head.tf_model_dim);
        let _ = writeln!(s, "head.tf_heads = {}", self.head.tf_heads);
        let _ = writeln!(s, "head.tf_layers = {}", self.head.tf_layers);
        let _ = writeln!(s, "head.tf_ffn_dim = {}", self.head.tf_ffn_dim);
        let _ = writeln!(s, "head.dropout = {}", self.head.dropout);
        let w = self.ensemble.weights;
        let _ = writeln!(s, "ensemble.weights = {},{},{}", w[0], w[1], w[2]);
        if let Some(lm) = &self.label_map {
            let _ = writeln!(s, "run.label_map = {}", lm.display());
        }
        let _ = writeln!(s, "run.deterministic = {}", self.deterministic);
        s
    }
}

fn parse_typed<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| {
        FerError::Config(format!("key {key}: expected {expected}, got {value:?}"))
    })
}

/// Parse and validate a config file. Unknown keys are errors; every
/// unspecified key takes its default.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FerError::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (ix, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FerError::Config(format!("line {}: expected `key = value`, got {raw:?}", ix + 1))
        })?;
        let key = key.trim().to_string();
        if kv.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(FerError::Config(format!("duplicate key {key}")));
        }
    }

    let mut take = |k: &str| kv.remove(k);

    let require_path = |k: &str, v: Option<String>| -> Result<PathBuf> {
        v.map(PathBuf::from)
            .ok_or_else(|| FerError::Config(format!("missing required key {k}")))
    };
    let frames_root = require_path("paths.frames_root", take("paths.frames_root"))?;
    let annotations_root = require_path("paths.annotations_root", take("paths.annotations_root"))?;
    let output_dir = require_path("paths.output_dir", take("paths.output_dir"))?;

    let mut train = TrainConfig::default();
    if let Some(v) = take("train.base_lr") {
        train.base_lr = parse_typed("train.base_lr", &v, "real")?;
    }
    if let Some(v) = take("train.epochs") {
        train.epochs = parse_typed("train.epochs", &v, "integer")?;
    }
    if let Some(v) = take("train.milestones") {
        train.milestones = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_typed("train.milestones", s.trim(), "comma-separated integers"))
            .collect::<Result<Vec<usize>>>()?;
    }
    if let Some(v) = take("train.lr_gamma") {
        train.lr_gamma = parse_typed("train.lr_gamma", &v, "real")?;
    }
    if let Some(v) = take("train.batch_size") {
        train.batch_size = if v == "auto" {
            None
        } else {
            Some(parse_typed("train.batch_size", &v, "integer or `auto`")?)
        };
    }
    if let Some(v) = take("train.seed") {
        train.seed = parse_typed("train.seed", &v, "integer")?;
    }
    if let Some(v) = take("train.window_t") {
        train.window_t = parse_typed("train.window_t", &v, "odd integer")?;
    }
    if let Some(v) = take("train.window_stride") {
        train.window_stride = parse_typed("train.window_stride", &v, "integer")?;
    }
    if let Some(v) = take("train.momentum") {
        train.momentum = parse_typed("train.momentum", &v, "real")?;
    }
    if let Some(v) = take("train.grad_clip") {
        train.grad_clip = if v == "none" {
            None
        } else {
            Some(parse_typed("train.grad_clip", &v, "real or `none`")?)
        };
    }

    let mut backbone = BackboneConfig::default();
    if let Some(v) = take("backbone.architecture") {
        backbone.architecture = v.parse::<Architecture>()?;
    }
    if let Some(v) = take("backbone.pretrained_weights") {
        backbone.pretrained_weights_path = Some(PathBuf::from(v));
    }

    let mut head = TemporalHeadConfig::default();
    if let Some(v) = take("head.kind") {
        head.kind = v.parse::<HeadKind>()?;
    }
    if let Some(v) = take("head.gru_layers") {
        head.gru_layers = parse_typed("head.gru_layers", &v, "integer")?;
    }
    if let Some(v) = take("head.gru_hidden") {
        head.gru_hidden = parse_typed("head.gru_hidden", &v, "integer")?;
    }
    if let Some(v) = take("head.tf_model_dim") {
        head.tf_model_dim = parse_typed("head.tf_model_dim", &v, "integer")?;
    }
    if let Some(v) = take("head.tf_heads") {
        head.tf_heads = parse_typed("head.tf_heads", &v, "integer")?;
    }
    if let Some(v) = take("head.tf_layers") {
        head.tf_layers = parse_typed("head.tf_layers", &v, "integer")?;
    }
    if let Some(v) = take("head.tf_ffn_dim") {
        head.tf_ffn_dim = parse_typed("head.tf_ffn_dim", &v, "integer")?;
    }
    if let Some(v) = take("head.dropout") {
        head.dropout = parse_typed("head.dropout", &v, "real")?;
    }

    let mut ensemble = EnsembleConfig::default();
    if let Some(v) = take("ensemble.weights") {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(FerError::Config(format!(
                "key ensemble.weights: expected 3 comma-separated reals, got {v:?}"
            )));
        }
        let mut w = [0.0; 3];
        for (i, p) in parts.iter().enumerate() {
            w[i] = parse_typed("ensemble.weights", p, "real")?;
        }
        ensemble = EnsembleConfig::new(w)?;
    }

    let label_map = take("run.label_map").map(PathBuf::from);
    let deterministic = match take("run.deterministic") {
        Some(v) => parse_typed("run.deterministic", &v, "true or false")?,
        None => false,
    };

    if let Some((key, _)) = kv.into_iter().next() {
        return Err(FerError::Config(format!("unknown config key {key}")));
    }

    let cfg = RunConfig {
        frames_root,
        annotations_root,
        output_dir,
        train,
        backbone,
        head,
        ensemble,
        label_map,
        deterministic,
    };
    cfg.validate()?;
    Ok(cfg)
}
