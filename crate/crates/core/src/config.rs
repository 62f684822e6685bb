//! Experiment configuration: one JSON document with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::corpus::{parse_json, read_file};
use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::losses::NucleiLoss;
use crate::post::PostConfig;
use crate::train::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    pub train: TrainConfig,
    pub post: PostConfig,
    pub eval: EvalConfig,
}

/// Named configurations for the ablation grid.
pub const PRESETS: [&str; 6] = ["cianet", "no-iam", "bce", "bootstrapped", "truncated", "smooth_truncated"];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.seen.validate()?;
        self.corpus.unseen.validate()?;
        self.corpus.noise.validate()?;
        self.train.validate()?;
        self.post.validate()?;
        self.eval.validate()
    }

    /// Reads a JSON config; absent keys keep their defaults, unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let value: Value = parse_json(&bytes, path)?;
        check_known(&value, &serde_json::to_value(Self::default()).expect("serializable"), "")?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `a.b.c=value` overrides. Values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("serializable");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = parsed;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies an ablation preset by name.
    pub fn with_preset(&self, name: &str) -> Result<Self> {
        let mut cfg = self.clone();
        match name {
            "cianet" => {
                cfg.train.model.use_iam = true;
                cfg.train.loss.nuclei_loss = NucleiLoss::SmoothTruncated;
            }
            "no-iam" => cfg.train.model.use_iam = false,
            loss => cfg.train.loss.nuclei_loss = loss.parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_known(value: &Value, reference: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(m), Value::Object(r)) = (value, reference) {
        for (k, v) in m {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rv) => check_known(v, rv, &key)?,
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }
    }
    Ok(())
}
