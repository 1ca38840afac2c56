use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{self, Section};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Number of past activities per window.
    pub window_n: usize,
    /// Tokens per encoded activity.
    pub pad_to: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.001,
            batch_size: 128,
            dropout: 0.2,
            window_n: 50,
            pad_to: 15,
            embed_dim: 100,
            hidden: 256,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

pub const KEYS: [&str; 12] = [
    "epochs",
    "learning_rate",
    "batch_size",
    "dropout",
    "window_n",
    "pad_to",
    "embed_dim",
    "hidden",
    "beta1",
    "beta2",
    "epsilon",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.window_n > 0
            && self.pad_to > 0
            && self.embed_dim > 0
            && self.hidden > 0
            && self.learning_rate >= 0.0
            && self.epsilon > 0.0;
        if !positive {
            return Err(Error::Usage(format!("train config values must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Usage("adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Window length in tokens.
    pub fn steps(&self) -> usize {
        self.window_n * self.pad_to
    }

    /// Overrides fields present in `s`; unknown keys are ignored so the
    /// same section can carry pipeline settings.
    pub fn apply(&mut self, s: &Section, origin: &str) -> Result<()> {
        self.epochs = s.parse_or(origin, "epochs", self.epochs)?;
        self.learning_rate = s.parse_or(origin, "learning_rate", self.learning_rate)?;
        self.batch_size = s.parse_or(origin, "batch_size", self.batch_size)?;
        self.dropout = s.parse_or(origin, "dropout", self.dropout)?;
        self.window_n = s.parse_or(origin, "window_n", self.window_n)?;
        self.pad_to = s.parse_or(origin, "pad_to", self.pad_to)?;
        self.embed_dim = s.parse_or(origin, "embed_dim", self.embed_dim)?;
        self.hidden = s.parse_or(origin, "hidden", self.hidden)?;
        self.beta1 = s.parse_or(origin, "beta1", self.beta1)?;
        self.beta2 = s.parse_or(origin, "beta2", self.beta2)?;
        self.epsilon = s.parse_or(origin, "epsilon", self.epsilon)?;
        self.seed = s.parse_or(origin, "seed", self.seed)?;
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<TrainConfig> {
        let sections = kv::parse(text, origin)?;
        let mut cfg = TrainConfig::default();
        cfg.apply(&sections[0], origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let vals = [
            self.epochs.to_string(),
            self.learning_rate.to_string(),
            self.batch_size.to_string(),
            self.dropout.to_string(),
            self.window_n.to_string(),
            self.pad_to.to_string(),
            self.embed_dim.to_string(),
            self.hidden.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.epsilon.to_string(),
            self.seed.to_string(),
        ];
        KEYS.into_iter().zip(vals).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_training_configuration() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.hidden, c.pad_to), (50, 128, 256, 15));
        assert_eq!((c.learning_rate, c.dropout), (0.001, 0.2));
    }

    #[test]
    fn render_parse_roundtrip() {
        let c = TrainConfig { dropout: 0.35, seed: 99, hidden: 7, ..Default::default() };
        assert_eq!(TrainConfig::parse(&c.render(), "t").unwrap(), c);
        assert!(TrainConfig::parse("dropout = 1.0\n", "t").is_err());
        assert!(TrainConfig::parse("epochs = 0\n", "t").is_err());
    }
}
