//! Run configuration: a flat key/value TOML document.
//!
//! Section headers are accepted for readability but carry no meaning; every
//! key must be unique across the file. `key=value` overrides are applied on
//! top, and the fully resolved configuration is written next to every run's
//! outputs so the run can be repeated from that file alone.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    BackboneSpec, ConditioningConfig, ConditioningMode, EncoderKind, HdscPlacement, ModelConfig, SkipMode,
};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::optim::AdamWConfig;
use crate::sampling::JitterConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeSampling {
    /// Each batch element picks a volume uniformly.
    UniformVolume,
    /// Each batch element picks an age uniformly, then a volume of that age.
    UniformAge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,

    // data
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub unseen_manifests: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,

    // model
    pub encoder_kind: EncoderKind,
    pub stage_channels: Vec<usize>,
    /// Defaults to summation for the residual encoder and concatenation otherwise.
    pub skip_mode: Option<SkipMode>,
    pub dropout: f64,
    pub res2_scales: usize,
    pub norm_groups: usize,
    pub conditioning: ConditioningMode,
    pub hdsc_placement: HdscPlacement,
    pub hid_dim: usize,
    pub heads: usize,
    pub num_ages: usize,
    pub consa_residual: bool,
    pub consa_prenorm: bool,
    pub attention_dropout: f64,

    // training
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub age_sampling: AgeSampling,
    pub crop_size: usize,
    pub jitter: f64,
    pub jitter_symmetric: bool,
    pub intensity_aug_prob: f64,
    pub spatial_aug: bool,
    pub val_fraction: f64,
    /// Validation period in steps; 0 validates only at the end.
    pub val_every: usize,

    // loss
    pub alpha: f64,
    pub dice_smooth: f64,
    pub ce_literal: bool,

    // evaluation
    pub tile_overlap: f64,

    // ablation
    pub modes: Vec<ConditioningMode>,

    // phantom
    pub phantom_depth: usize,
    pub phantom_height: usize,
    pub phantom_width: usize,
    pub volumes_per_age: usize,
    pub annotated_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for Config {
    fn default() -> Self {
        use ConditioningMode as M;
        Self {
            seed: 0,
            precision: Precision::F32,
            train_manifest: None,
            test_manifest: None,
            unseen_manifests: Vec::new(),
            checkpoints: Vec::new(),
            encoder_kind: EncoderKind::CnnRes2,
            stage_channels: vec![64, 128, 256, 512, 1024],
            skip_mode: None,
            dropout: 0.1,
            res2_scales: 4,
            norm_groups: 8,
            conditioning: M::ConsaHdsc,
            hdsc_placement: HdscPlacement::Decoder,
            hid_dim: 64,
            heads: 4,
            num_ages: 4,
            consa_residual: false,
            consa_prenorm: true,
            attention_dropout: 0.1,
            epochs: 700,
            steps_per_epoch: 50,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-3,
            age_sampling: AgeSampling::UniformAge,
            crop_size: 256,
            jitter: 0.2,
            jitter_symmetric: false,
            intensity_aug_prob: 0.5,
            spatial_aug: true,
            val_fraction: 0.1,
            val_every: 0,
            alpha: 0.5,
            dice_smooth: 1e-5,
            ce_literal: false,
            tile_overlap: 0.25,
            modes: vec![M::None, M::Film, M::ConsaAge, M::Consa, M::HdscDecoder, M::ConsaHdsc],
            phantom_depth: 64,
            phantom_height: 96,
            phantom_width: 96,
            volumes_per_age: 2,
            annotated_fraction: 0.026,
            noise_sigma: 0.05,
        }
    }
}

/// Moves the entries of every top-level table up one level.
fn flatten(table: toml::Table) -> Result<toml::Table> {
    let mut flat = toml::Table::new();
    let put = |k: String, v: toml::Value, flat: &mut toml::Table| {
        if flat.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("key {k} given twice")));
        }
        Ok(())
    };
    for (k, v) in table {
        match v {
            toml::Value::Table(inner) => {
                for (ik, iv) in inner {
                    put(ik, iv, &mut flat)?;
                }
            }
            other => put(k, other, &mut flat)?,
        }
    }
    Ok(flat)
}

/// Parses `key=value`. The value is read as a TOML literal when possible and
/// as a bare string otherwise; `section.key` is accepted for `key`.
pub fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item} is not key=value")))?;
    let key = k.trim().rsplit('.').next().unwrap_or_default().to_string();
    if key.is_empty() {
        return Err(Error::Config(format!("override {item} has an empty key")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((key, value))
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut flat = flatten(table)?;
        for item in overrides {
            let (k, v) = parse_override(item)?;
            flat.insert(k, v);
        }
        let cfg: Config = toml::Value::Table(flat)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (if any), applies overrides, and resolves relative data
    /// paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
                (text, p.parent().map(Path::to_path_buf))
            }
            None => (String::new(), None),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(base) = base {
            cfg.resolve_paths(&base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.train_manifest.as_mut().map(fix);
        self.test_manifest.as_mut().map(fix);
        self.checkpoints.iter_mut().for_each(fix);
        self.unseen_manifests.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("crop_size", self.crop_size),
            ("hid_dim", self.hid_dim),
            ("heads", self.heads),
            ("num_ages", self.num_ages),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        for (k, v) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("val_fraction", self.val_fraction),
            ("intensity_aug_prob", self.intensity_aug_prob),
            ("tile_overlap", self.tile_overlap),
        ] {
            if !(0.0..1.0).contains(&v) && !(k == "intensity_aug_prob" && v == 1.0) {
                return Err(Error::Config(format!("{k} = {v} outside [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.annotated_fraction) {
            return Err(Error::Config("annotated_fraction outside [0, 1]".into()));
        }
        self.loss().validate()?;
        self.backbone().validate()?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn backbone(&self) -> BackboneSpec {
        let mut spec = match self.encoder_kind {
            EncoderKind::CnnRes2 => BackboneSpec::res2(self.stage_channels.clone()),
            EncoderKind::CnnPlain => BackboneSpec::unet(self.stage_channels.clone()),
        };
        if let Some(skip) = self.skip_mode {
            spec.skip_mode = skip;
        }
        spec.dropout = self.dropout;
        spec.res2_scales = self.res2_scales;
        spec.norm_groups = self.norm_groups;
        spec
    }

    pub fn conditioning_config(&self, mode: ConditioningMode) -> ConditioningConfig {
        ConditioningConfig {
            mode,
            hdsc_placement: self.hdsc_placement,
            hid_dim: self.hid_dim,
            heads: self.heads,
            num_ages: self.num_ages,
            consa_residual: self.consa_residual,
            consa_prenorm: self.consa_prenorm,
            attention_dropout: self.attention_dropout,
        }
    }

    pub fn model(&self) -> ModelConfig {
        self.model_with_mode(self.conditioning)
    }

    pub fn model_with_mode(&self, mode: ConditioningMode) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            conditioning: self.conditioning_config(mode),
            seed: self.seed,
            dtype: self.precision.dtype(),
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            dice_smooth: self.dice_smooth,
            ce_literal: self.ce_literal,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn jitter_config(&self) -> Option<JitterConfig> {
        (self.jitter > 0.0).then_some(JitterConfig {
            max: self.jitter,
            symmetric: self.jitter_symmetric,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
