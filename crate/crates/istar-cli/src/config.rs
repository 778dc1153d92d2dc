//! Flat `key=value` run configuration with namespaced keys, merged with
//! command-line `--set` overrides. Unknown keys are an error so typos
//! surface immediately; every run writes its fully resolved configuration
//! next to its outputs.

use std::path::Path;

use indexmap::IndexMap;

use istar_core::train::TrainConfig;
use istar_core::{Error, ModelConfig, Result};

/// All recognized keys, in the order the resolved file is written.
pub const KNOWN_KEYS: &[&str] = &[
    "model.scale",
    "model.channels",
    "model.iterations",
    "model.st_channels",
    "model.colors",
    "train.lr0",
    "train.halve_every",
    "train.epochs",
    "train.steps_per_epoch",
    "train.batch",
    "train.patch",
    "train.seed",
    "train.ckpt_every",
    "train.augment",
    "data.root",
    "eval.mode",
    "eval.threads",
    "solver.alpha",
    "solver.lambda",
    "solver.max_iters",
    "solver.tol",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: IndexMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("{key}={v}: {e}"))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let scale = self.parsed("model.scale", 2usize)?;
        let channels = self.parsed("model.channels", 64usize)?;
        let mut cfg = ModelConfig {
            scale,
            channels,
            iterations: self.parsed("model.iterations", 16usize)?,
            st_channels: self.parsed("model.st_channels", (channels / 4).max(1))?,
            colors: self.parsed("model.colors", 3usize)?,
        };
        // explicit st_channels wins over the derived default
        if let Some(v) = self.values.get("model.st_channels") {
            cfg.st_channels = v
                .parse()
                .map_err(|e| Error::Config(format!("model.st_channels={v}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: self.parsed("train.lr0", d.lr0)?,
            halve_every: self.parsed("train.halve_every", d.halve_every)?,
            epochs: self.parsed("train.epochs", d.epochs)?,
            steps_per_epoch: self.parsed("train.steps_per_epoch", d.steps_per_epoch)?,
            batch: self.parsed("train.batch", d.batch)?,
            patch: self.parsed("train.patch", d.patch)?,
            seed: self.parsed("train.seed", d.seed)?,
            ckpt_every: self.parsed("train.ckpt_every", d.ckpt_every)?,
            augment: self.parsed("train.augment", d.augment)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_root(&self) -> Result<std::path::PathBuf> {
        self.values
            .get("data.root")
            .map(std::path::PathBuf::from)
            .ok_or_else(|| Error::Config("data.root is required".into()))
    }

    /// Render every known key with its effective value (defaults filled in).
    pub fn resolved(&self) -> Result<String> {
        let model = self.model_config()?;
        let train = self.train_config()?;
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        push("model.scale", model.scale.to_string());
        push("model.channels", model.channels.to_string());
        push("model.iterations", model.iterations.to_string());
        push("model.st_channels", model.st_channels.to_string());
        push("model.colors", model.colors.to_string());
        push("train.lr0", format!("{:e}", train.lr0));
        push("train.halve_every", train.halve_every.to_string());
        push("train.epochs", train.epochs.to_string());
        push("train.steps_per_epoch", train.steps_per_epoch.to_string());
        push("train.batch", train.batch.to_string());
        push("train.patch", train.patch.to_string());
        push("train.seed", train.seed.to_string());
        push("train.ckpt_every", train.ckpt_every.to_string());
        push("train.augment", train.augment.to_string());
        for key in ["data.root", "eval.mode", "eval.threads", "solver.alpha", "solver.lambda", "solver.max_iters", "solver.tol"] {
            if let Some(v) = self.values.get(key) {
                push(key, v.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::parse("model.scale=3\ntrain.lr0=2e-3 # comment\n\n# full line\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().scale, 3);
        assert_eq!(cfg.train_config().unwrap().lr0, 2e-3);
        assert!(RunConfig::parse("model.scael=3\n").is_err());
        assert!(RunConfig::parse("no_equals_sign\n").is_err());
        assert!(RunConfig::parse("model.scale=banana\n").unwrap().model_config().is_err());
    }

    #[test]
    fn st_channels_follows_width_unless_pinned() {
        let cfg = RunConfig::parse("model.channels=16\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().st_channels, 4);
        let cfg = RunConfig::parse("model.channels=16\nmodel.st_channels=7\n").unwrap();
        assert_eq!(cfg.model_config().unwrap().st_channels, 7);
    }

    #[test]
    fn resolved_is_reparseable_and_stable() {
        let cfg = RunConfig::parse("model.scale=2\ntrain.seed=9\ndata.root=/tmp/x\n").unwrap();
        let text = cfg.resolved().unwrap();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again.resolved().unwrap(), text);
        assert!(text.contains("train.seed=9"));
        assert!(text.contains("data.root=/tmp/x"));
    }
}
