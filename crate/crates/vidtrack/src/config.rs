//! Run configuration: a TOML file plus `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;
use vidtrack_core::buddies::MinerConfig;
use vidtrack_core::flow::ChainConfig;
use vidtrack_core::losses::LossWeights;
use vidtrack_core::visibility::VisibilityConfig;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Frame directory or GIF.
    pub video: Option<PathBuf>,
    pub output: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub working_height: usize,
    pub mock: bool,
    /// Descriptor width of the mock backbone.
    pub mock_dim: usize,
    pub backbone_weights: Option<PathBuf>,
    pub backbone_heads: Option<usize>,
    /// Directory of `{source:05}_{target:05}.flo` files.
    pub flow_dir: Option<PathBuf>,
    /// Optional per-frame foreground mask images.
    pub masks_dir: Option<PathBuf>,
    pub double_precision: bool,
    pub backbone: BackboneConfig,
    pub chain: ChainConfig,
    pub miner: MinerConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub visibility: VisibilityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            video: None,
            output: "vidtrack-out".into(),
            cache_dir: None,
            seed: 0,
            working_height: 480,
            mock: false,
            mock_dim: 384,
            backbone_weights: None,
            backbone_heads: None,
            flow_dir: None,
            masks_dir: None,
            double_precision: false,
            backbone: BackboneConfig::default(),
            chain: ChainConfig::default(),
            miner: MinerConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::default(),
            losses: LossWeights::default(),
            visibility: VisibilityConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Table(b), Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Keys of `user` absent from `known`, as dotted paths.
fn unknown_keys(user: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Table(u), Value::Table(k)) = (user, known) {
        for (key, v) in u {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` and then with the `(key, value)`
    /// overrides; dotted keys address nested sections (`train.lr`).
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user = Value::Table(toml::Table::new());
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let t: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Decode { path: path.into(), msg: e.to_string() })?;
            merge(&mut user, Value::Table(t));
        }
        for (key, raw) in overrides {
            let mut patch = parse_scalar(raw);
            for part in key.rsplit('.') {
                if part.is_empty() {
                    return Err(Error::input(format!("malformed config key {key:?}")));
                }
                let mut t = toml::Table::new();
                t.insert(part.to_string(), patch);
                patch = Value::Table(t);
            }
            merge(&mut user, patch);
        }
        let defaults = Value::try_from(RunConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
        let mut full = defaults.clone();
        merge(&mut full, user.clone());
        let cfg: RunConfig = match full.try_into() {
            Ok(c) => c,
            Err(e) => {
                let mut unknown = Vec::new();
                unknown_keys(&user, &defaults, "", &mut unknown);
                if unknown.is_empty() {
                    return Err(Error::input(format!("config: {e}")));
                }
                return Err(Error::input(format!("unknown config keys: {}", unknown.join(", "))));
            }
        };
        let resolved = Value::try_from(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&user, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::input(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.chain.validate()?;
        self.miner.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        self.visibility.validate()?;
        if self.working_height < 32 || self.mock_dim == 0 {
            return Err(Error::input("working_height must be at least 32 and mock_dim positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::input(format!("expected --key value, got {a:?}")));
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::input(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}
