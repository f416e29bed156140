//! Run configuration: network, optimizer and path settings in one flat
//! `key = value` file.

use std::path::PathBuf;

use gvtnet::kv;
use gvtnet::training::TrainConfig;
use gvtnet::{Error, NetConfig, Result};

pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "batch",
    "seed",
    "checkpoint_every",
    "log_every",
];
pub const PATH_KEYS: &[&str] = &["run_dir", "data_dir"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub run_dir: PathBuf,
    /// Directory of HR training PNGs; `None` means the bundled fixtures.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::toy(),
            train: TrainConfig::default(),
            run_dir: PathBuf::from("run"),
            data_dir: None,
        }
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are an error naming the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.net.apply(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "lr" => t.lr = kv::parse_value(key, value)?,
            "beta1" => t.beta1 = kv::parse_value(key, value)?,
            "beta2" => t.beta2 = kv::parse_value(key, value)?,
            "eps" => t.eps = kv::parse_value(key, value)?,
            "steps" => t.steps = kv::parse_value(key, value)?,
            "batch" => t.batch = kv::parse_value(key, value)?,
            "seed" => t.seed = kv::parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = kv::parse_value(key, value)?,
            "log_every" => t.log_every = kv::parse_value(key, value)?,
            "run_dir" => {
                if value.is_empty() {
                    return Err(Error::config(key, "must not be empty"));
                }
                self.run_dir = PathBuf::from(value);
            }
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in kv::parse(text)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let mut out: Vec<(String, String)> = self
            .net
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for (k, v) in [
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("steps", t.steps.to_string()),
            ("batch", t.batch.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("log_every", t.log_every.to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            (
                "data_dir",
                self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ] {
            out.push((k.to_string(), v));
        }
        out
    }

    /// Every key in a fixed order; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        kv::render(&self.to_pairs())
    }
}
