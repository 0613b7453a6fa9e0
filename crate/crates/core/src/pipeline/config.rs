//! Flat `key = value` config files.
//!
//! Lines are `key = value` with `#` comments and blank lines ignored. Keys
//! mirror [`TrainConfig`] fields; synthetic-data settings use a `synth.`
//! prefix. Unknown keys are an error so typos fail fast. See the README
//! for the full schema.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{ArchConfig, Task, TrainConfig, Variant};
use crate::data::synth::{SynthConfig, SynthFamily};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Parsed key-value file with used-key tracking.
pub struct KvConfig {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    ln + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
        }
        Ok(KvConfig {
            map,
            used: BTreeSet::new(),
        })
    }

    pub fn get(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.map.get(key).cloned()
    }

    pub fn get_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key {key:?}: cannot parse value {v:?}"))
            }),
        }
    }

    pub fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.get(key).as_deref() {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("key {key:?}: expected bool, got {v:?}"))),
        }
    }

    /// Error if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        let unused: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unused
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }
}

/// Read the `synth.*` section; `default_seed` applies when `synth.seed` is
/// absent.
pub fn synth_from_kv(kv: &mut KvConfig, default_seed: u64) -> Result<Option<SynthConfig>> {
    if !kv.has_prefix("synth.") {
        return Ok(None);
    }
    let mut cfg = SynthConfig::default();
    if let Some(f) = kv.get("synth.family") {
        cfg.family = f.parse::<SynthFamily>()?;
    }
    cfg.seed = kv.get_parse("synth.seed")?.unwrap_or(default_seed);
    if let Some(v) = kv.get_parse("synth.canvas")? {
        cfg.canvas = v;
    }
    if let Some(v) = kv.get_parse("synth.n_train")? {
        cfg.n_train = v;
    }
    if let Some(v) = kv.get_parse("synth.n_test")? {
        cfg.n_test = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_count_min")? {
        cfg.vessel_count.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_count_max")? {
        cfg.vessel_count.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_width_min")? {
        cfg.vessel_width.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_width_max")? {
        cfg.vessel_width.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_contrast_min")? {
        cfg.vessel_contrast.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.vessel_contrast_max")? {
        cfg.vessel_contrast.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.noise_amplitude")? {
        cfg.noise_amplitude = v;
    }
    if let Some(v) = kv.get_parse("synth.noise_freq_lo")? {
        cfg.noise_freq.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.noise_freq_hi")? {
        cfg.noise_freq.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.noise_gratings")? {
        cfg.noise_gratings = v;
    }
    if let Some(v) = kv.get_parse("synth.disc_radius_min")? {
        cfg.disc_radius.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.disc_radius_max")? {
        cfg.disc_radius.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.cup_ratio_min")? {
        cfg.cup_ratio.0 = v;
    }
    if let Some(v) = kv.get_parse("synth.cup_ratio_max")? {
        cfg.cup_ratio.1 = v;
    }
    if let Some(v) = kv.get_parse("synth.fov_radius")? {
        cfg.fov_radius = v;
    }
    cfg.validate()?;
    Ok(Some(cfg))
}

/// Build a [`TrainConfig`] from parsed keys. `task` is required.
pub fn train_from_kv(kv: &mut KvConfig) -> Result<TrainConfig> {
    let task: Task = kv
        .get("task")
        .ok_or_else(|| Error::Config("missing required key `task`".into()))?
        .parse()?;
    let variant: Variant = match kv.get("variant") {
        Some(v) => v.parse()?,
        None => Variant::Std,
    };
    let out_dir = kv
        .get("out_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}", task.as_str(), variant.slug())));

    let mut cfg = TrainConfig::new(task, variant, out_dir);
    cfg.data_root = kv.get("data_root").map(PathBuf::from);
    if let Some(v) = kv.get_parse("seed")? {
        cfg.seed = v;
    }
    cfg.synth = synth_from_kv(kv, cfg.seed)?;
    if let Some(v) = kv.get_parse("image_size")? {
        cfg.image_size = v;
    }
    if let Some(v) = kv.get_parse("crop_margin")? {
        cfg.crop_margin = v;
    }
    if let Some(v) = kv.get_parse("crop_size")? {
        cfg.crop_size = v;
    }
    if let Some(v) = kv.get_parse("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = kv.get_parse("batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = kv.get_parse("epochs")? {
        cfg.epochs = v;
    }
    cfg.max_steps = kv.get_parse("max_steps")?;
    let lambda_s = kv.get_parse("lambda_s")?.unwrap_or(cfg.weights.lambda_s);
    let mu = kv.get_parse("mu")?.unwrap_or(cfg.weights.mu);
    cfg.weights = LossWeights::new(lambda_s, mu)?;
    if let Some(v) = kv.get("loss_reduction") {
        cfg.reduction = v.parse()?;
    }
    if let Some(v) = kv.get_bool("augment")? {
        cfg.augment = v;
    }
    if let Some(v) = kv.get_parse("threshold")? {
        cfg.threshold = v;
    }
    if let Some(v) = kv.get("metric_aggregation") {
        cfg.aggregation = v.parse()?;
    }
    let mut arch = ArchConfig::default();
    if let Some(v) = kv.get_parse("std_channels")? {
        arch.std_channels = v;
    }
    if let Some(v) = kv.get_parse("tblock_channels")? {
        arch.tblock_channels = v;
    }
    if let Some(v) = kv.get_parse("mnet_base")? {
        arch.mnet_base = v;
    }
    if let Some(v) = kv.get_parse("mnet_depth")? {
        arch.mnet_depth = v;
    }
    cfg.arch = arch;
    if let Some(v) = kv.get_parse("log_interval")? {
        cfg.log_interval = v;
    }
    if let Some(v) = kv.get_parse("checkpoint_interval")? {
        cfg.checkpoint_interval = v;
    }
    cfg.early_stop_train_iou = kv.get_parse("early_stop_train_iou")?;
    if let Some(v) = kv.get_parse("early_stop_check_every")? {
        cfg.early_stop_check_every = v;
    }
    Ok(cfg)
}

/// Parse a full training config file.
pub fn train_config_from_str(text: &str) -> Result<TrainConfig> {
    let mut kv = KvConfig::parse(text)?;
    let cfg = train_from_kv(&mut kv)?;
    kv.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_from_file(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    train_config_from_str(&text)
}

/// Parse an ablation config: a training config plus `variants` and `seeds`.
pub fn ablate_config_from_str(text: &str) -> Result<(TrainConfig, Vec<Variant>, Vec<u64>)> {
    let mut kv = KvConfig::parse(text)?;
    let variants: Vec<Variant> = match kv.get("variants") {
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let seeds: Vec<u64> = match kv.get("seeds") {
        Some(list) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed {v:?}")))
            })
            .collect::<Result<_>>()?,
        None => vec![1, 2, 3],
    };
    let cfg = train_from_kv(&mut kv)?;
    kv.finish()?;
    cfg.validate()?;
    Ok((cfg, variants, seeds))
}

pub fn ablate_config_from_file(path: &Path) -> Result<(TrainConfig, Vec<Variant>, Vec<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ablate_config_from_str(&text)
}

/// Parse a synth-only config (for the `synth` subcommand).
pub fn synth_config_from_str(text: &str) -> Result<SynthConfig> {
    let mut kv = KvConfig::parse(text)?;
    let seed = kv.get_parse("seed")?.unwrap_or(0);
    let cfg = synth_from_kv(&mut kv, seed)?
        .ok_or_else(|| Error::Config("no synth.* keys found".into()))?;
    kv.finish()?;
    Ok(cfg)
}

pub fn synth_config_from_file(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    synth_config_from_str(&text)
}
