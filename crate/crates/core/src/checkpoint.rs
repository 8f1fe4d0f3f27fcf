//! Model/optimizer checkpoints on top of the weights container.

use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{DstNet, ModelConfig};
use crate::nn::{set_param, Parameterized};
use crate::priors::ConvExtractor;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, Trainer};

pub const CHECKPOINT_KIND: &str = "dstnet-checkpoint";

/// Everything needed to rebuild a model, and optionally resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<Adam>,
    pub extractor: ConvExtractor,
    pub epoch: u64,
    pub epoch_pos: usize,
    pub step: u64,
    pub seed: u64,
    pub best_psnr: Option<f64>,
}

fn meta<T: serde::de::DeserializeOwned>(c: &Container, key: &str) -> Result<T> {
    serde_json::from_value(c.meta.get(key).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| Error::CorruptCheckpoint(format!("field `{key}`: {e}")))
}

impl Checkpoint {
    /// Weights only (no optimizer state).
    pub fn from_model(net: &DstNet) -> Self {
        Self {
            model: net.config.clone(),
            train: None,
            params: net.state(),
            adam: None,
            extractor: net.extractor.clone(),
            epoch: 0,
            epoch_pos: 0,
            step: 0,
            seed: net.config.seed,
            best_psnr: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            train: Some(t.cfg.clone()),
            adam: Some(t.adam.clone()),
            epoch: t.epoch,
            epoch_pos: t.epoch_pos,
            step: t.step,
            seed: t.cfg.seed,
            best_psnr: t.best_psnr,
            ..Self::from_model(&t.net)
        }
    }

    pub fn to_container(&self) -> Container {
        let extractor = self.extractor.to_container();
        let mut c = Container::new(
            CHECKPOINT_KIND,
            json!({
                "config_hash": self.model.hash(),
                "model": self.model,
                "train": self.train,
                "epoch": self.epoch,
                "epoch_pos": self.epoch_pos,
                "step": self.step,
                "seed": self.seed,
                "best_psnr": self.best_psnr,
                "adam_t": self.adam.as_ref().map(|a| a.t),
                "extractor": extractor.meta,
            }),
        );
        for (name, t) in &self.params {
            c.push(format!("param.{name}"), t.clone());
        }
        if let Some(a) = &self.adam {
            for ((name, _), (m, v)) in self.params.iter().zip(a.m.iter().zip(&a.v)) {
                c.push(format!("adam.m.{name}"), m.clone());
                c.push(format!("adam.v.{name}"), v.clone());
            }
        }
        for (name, t) in extractor.arrays {
            c.push(format!("extractor.{name}"), t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::CorruptCheckpoint(format!("expected a {CHECKPOINT_KIND}, found `{}`", c.kind)));
        }
        let model: ModelConfig = meta(c, "model")?;
        let stored: String = meta(c, "config_hash")?;
        if stored != model.hash() {
            return Err(Error::CorruptCheckpoint("stored config hash does not match the stored config".into()));
        }
        let params: Vec<(String, Tensor)> = c
            .arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("param.").map(|n| (n.to_string(), t.clone())))
            .collect();
        let adam = match meta::<Option<u64>>(c, "adam_t")? {
            Some(t) => {
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, _) in &params {
                    let get = |k: &str| {
                        c.get(&format!("adam.{k}.{name}"))
                            .cloned()
                            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing adam.{k}.{name}")))
                    };
                    m.push(get("m")?);
                    v.push(get("v")?);
                }
                Some(Adam { t, m, v })
            }
            None => None,
        };
        let mut ex = Container::new("texture-extractor", meta(c, "extractor")?);
        for (n, t) in &c.arrays {
            if let Some(n) = n.strip_prefix("extractor.") {
                ex.push(n, t.clone());
            }
        }
        Ok(Self {
            model,
            train: meta(c, "train")?,
            params,
            adam,
            extractor: ConvExtractor::from_container(&ex).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?,
            epoch: meta(c, "epoch")?,
            epoch_pos: meta(c, "epoch_pos")?,
            step: meta(c, "step")?,
            seed: meta(c, "seed")?,
            best_psnr: meta(c, "best_psnr")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Rebuilds the model, refusing a checkpoint made under another config.
    pub fn into_model_checked(self, expected: &ModelConfig) -> Result<DstNet> {
        let (found, want) = (self.model.hash(), expected.hash());
        if found != want {
            return Err(Error::ConfigHashMismatch { found, expected: want });
        }
        self.into_model()
    }

    /// Rebuilds the model under the stored config.
    pub fn into_model(self) -> Result<DstNet> {
        let mut net = DstNet::new(self.model.clone())?;
        let mut slots = net.named_params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} parameter arrays, model has {}",
                self.params.len(),
                slots.len()
            )));
        }
        for ((name, slot), (stored, value)) in slots.iter_mut().zip(self.params) {
            if *name != stored || slot.shape() != value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter `{stored}` {:?} does not fit `{name}` {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            set_param(slot, value);
        }
        net.extractor = self.extractor;
        Ok(net)
    }

    /// Restores a trainer; `cfg.model` must hash like the stored config.
    pub fn into_trainer(self, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let (adam, epoch, epoch_pos, step, best) = (self.adam.clone(), self.epoch, self.epoch_pos, self.step, self.best_psnr);
        let net = self.into_model_checked(&cfg.model)?;
        if let Some(a) = &adam {
            let shapes_ok = a.m.len() == net.named_params().len()
                && a.m.iter().zip(net.named_params()).all(|(m, (_, p))| m.shape() == p.shape());
            if !shapes_ok {
                return Err(Error::CorruptCheckpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(Trainer::from_parts(net, cfg, adam, epoch, epoch_pos, step, best))
    }
}

pub fn save_model(net: &DstNet, path: &Path) -> Result<()> {
    Checkpoint::from_model(net).save(path)
}

pub fn load_model(path: &Path) -> Result<DstNet> {
    Checkpoint::load(path)?.into_model()
}
