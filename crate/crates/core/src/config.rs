//! Run configuration: flat dotted `key = value` TOML with CLI overrides and a
//! sorted resolved snapshot.
//!
//! Sections: `data.*`, `train.*`, `loss.*`, `model.*`, `enhance.*`, `ablate.*`.
//! `loss.*` and `model.*` are stored inside [`TrainConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const DATA_ROOT_ENV: &str = "DSTNET_DATA_ROOT";
pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root (`low/` + `high/`, or `manifest.txt`); falls back to `$DSTNET_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// When > 0 and no root is given, train/eval on this many synthetic pairs.
    pub synthetic: usize,
    pub synthetic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, synthetic: 0, synthetic_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Also write `<name>_grid.png` strips (input | curve stage | final | gt).
    pub grid: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { grid: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Row names: `no_structure`, `no_color`, `no_texture`, `no_priors`,
    /// `all_on`, or a loss toggle `no_l1` / `no_ssim` / `no_exp` / `no_tv` / `no_hsv`.
    pub rows: Vec<String>,
    /// Fine-tuning steps from the checkpoint for loss-toggle rows.
    pub finetune_steps: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            rows: ["no_structure", "no_color", "no_texture", "no_priors"].map(String::from).to_vec(),
            finetune_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub ablate: AblateConfig,
}

/// `loss.x` / `model.x` live under `train.` internally.
fn canonical(key: &str) -> String {
    for sec in ["loss.", "model."] {
        if key.starts_with(sec) {
            return format!("train.{key}");
        }
    }
    key.to_string()
}

fn public(key: &str) -> &str {
    match key.strip_prefix("train.") {
        Some(rest) if rest.starts_with("loss.") || rest.starts_with("model.") => rest,
        _ => key,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Null => {}
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = serde_json::Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` conflicts with a scalar key")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

/// Parses an override value as a TOML literal; bare words become strings.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"]).unwrap_or_else(|_| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Flat map of a TOML document (nested tables and dotted keys both accepted).
pub fn parse_toml(text: &str) -> Result<BTreeMap<String, Value>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let json = serde_json::to_value(&table).map_err(|e| Error::Config(e.to_string()))?;
    let mut raw = BTreeMap::new();
    flatten("", &json, &mut raw);
    Ok(raw.into_iter().map(|(k, v)| (canonical(&k), v)).collect())
}

impl Settings {
    /// File values, then `k=v` overrides (later wins), then validation.
    pub fn resolve(config_path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = match config_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|_| Error::MissingPath(p.to_path_buf()))?;
                parse_toml(&text)?
            }
            None => BTreeMap::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            flat.insert(canonical(k.trim()), parse_value(v));
        }
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let s: Settings = serde_json::from_value(unflatten(flat)?).map_err(|e| Error::Config(e.to_string()))?;
        s.train.validate()?;
        Ok(s)
    }

    /// Sets the training seed and the model seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.train.model.seed = seed;
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    /// Sorted public keys with their values.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let json = serde_json::to_value(self).expect("settings serialize");
        let mut raw = BTreeMap::new();
        flatten("", &json, &mut raw);
        raw.into_iter().map(|(k, v)| (public(&k).to_string(), v)).collect()
    }

    /// One `key = value` line per setting, keys sorted.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let tv: toml::Value = serde_json::from_value(v).expect("json scalar converts to toml");
            s.push_str(&format!("{k} = {tv}\n"));
        }
        s
    }

    pub fn write_snapshot(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.snapshot())?;
        Ok(path)
    }
}
