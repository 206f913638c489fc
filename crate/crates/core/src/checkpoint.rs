//! Single-file training checkpoints.
//!
//! Tensors (parameters and optimizer moments) are stored in a safetensors
//! archive; the resolved config, step counter, seed, sampling stream state and
//! metric log travel in the archive's string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::SegModel;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::AdamW;

const PARAM: &str = "param/";
const FIRST: &str = "adam_m/";
const SECOND: &str = "adam_v/";

/// One row of the training metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub steps: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Resolved config; `conditioning` is the mode of the stored model.
    pub config: Config,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub best_val: Option<f64>,
    pub log: Vec<LogRow>,
}

/// Batch draws are a pure function of `(seed, step)`, so this pair is the
/// complete state of the sampling stream.
pub fn rng_state(seed: u64, step: usize) -> String {
    format!("chacha8 seed={seed} step={step}")
}

fn meta_err(what: &str) -> Error {
    Error::Checkpoint(format!("checkpoint metadata lacks {what}"))
}

impl Checkpoint {
    pub fn new(config: Config, model: &SegModel, step: usize) -> Result<Self> {
        let mut config = config;
        config.conditioning = model.mode();
        Ok(Self {
            config,
            step,
            params: model.store().snapshot()?,
            optimizer: None,
            best_val: None,
            log: Vec::new(),
        })
    }

    pub fn with_optimizer(mut self, opt: &AdamW) -> Result<Self> {
        let (m, v) = opt.moments();
        let copy = |t: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            t.iter().map(|(k, x)| Ok((k.clone(), x.copy()?))).collect()
        };
        self.optimizer = Some(OptimizerState {
            steps: opt.steps_taken(),
            first: copy(m)?,
            second: copy(v)?,
        });
        Ok(self)
    }

    /// Rebuilds the model from the stored config and loads the parameters.
    pub fn build_model(&self) -> Result<SegModel> {
        let model = self.config.model().build()?;
        model.store().load(&self.params)?;
        Ok(model)
    }

    pub fn restore_optimizer(&self) -> Option<AdamW> {
        self.optimizer
            .as_ref()
            .map(|o| AdamW::restore(self.config.adamw(), o.steps, o.first.clone(), o.second.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (format!("{PARAM}{k}"), t)).collect();
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), self.config.to_toml()?);
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("seed".to_string(), self.config.seed.to_string());
        meta.insert("rng".to_string(), rng_state(self.config.seed, self.step));
        meta.insert(
            "log".to_string(),
            serde_json::to_string(&self.log).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        if let Some(b) = self.best_val {
            meta.insert("best_val".to_string(), format!("{b:e}"));
        }
        if let Some(o) = &self.optimizer {
            meta.insert("optimizer_steps".to_string(), o.steps.to_string());
            tensors.extend(o.first.iter().map(|(k, t)| (format!("{FIRST}{k}"), t)));
            tensors.extend(o.second.iter().map(|(k, t)| (format!("{SECOND}{k}"), t)));
        }
        safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).ok_or_else(|| meta_err(k));
        let config = Config::from_toml_str(get("config")?, &[])?;
        let step: usize = get("step")?.parse().map_err(|_| meta_err("a numeric step"))?;
        let log: Vec<LogRow> = serde_json::from_str(get("log")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let best_val = match meta.get("best_val") {
            Some(s) => Some(s.parse().map_err(|_| meta_err("a numeric best_val"))?),
            None => None,
        };
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let (mut params, mut first, mut second) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(FIRST) {
                first.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(SECOND) {
                second.insert(k.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        let optimizer = match meta.get("optimizer_steps") {
            Some(s) => Some(OptimizerState {
                steps: s.parse().map_err(|_| meta_err("numeric optimizer_steps"))?,
                first,
                second,
            }),
            None => None,
        };
        Ok(Self {
            config,
            step,
            params,
            optimizer,
            best_val,
            log,
        })
    }
}
