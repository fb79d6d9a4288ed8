use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::parambudget::{self, BudgetQuery, Policy};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
    /// Patch side, equal to the cipher block size.
    pub patch: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub use_adaptive_matrix: bool,
    /// Weight of the permutation penalty in the loss.
    pub lambda: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.hidden, self.depth, self.kernel, self.patch, self.n_classes, self.image_size].contains(&0) {
            return Err(invalid("model sizes must all be >= 1"));
        }
        if self.image_size % self.patch != 0 {
            return Err(invalid(format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Token grid side, `image_size / patch`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Number of tokens `n`.
    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn budget_query(&self) -> BudgetQuery {
        BudgetQuery {
            image_size: self.image_size as u64,
            block_size: self.patch as u64,
            hidden: self.hidden as u64,
            depth: self.depth as u64,
            kernel: self.kernel as u64,
            n_classes: self.n_classes as u64,
            n_classifier: None,
            policy: if self.use_adaptive_matrix { Policy::Proposed } else { Policy::ConvmixerPlain },
        }
    }

    /// Closed-form trainable parameter count for this configuration.
    pub fn expected_params(&self) -> Result<u64> {
        parambudget::count(&self.budget_query())
    }
}

/// How training data is scrambled before it reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncryptionMode {
    Off,
    On,
    /// Block permutation only; pixel shuffle and negative-positive disabled.
    PermOnly,
}

impl fmt::Display for EncryptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncryptionMode::Off => "off",
            EncryptionMode::On => "on",
            EncryptionMode::PermOnly => "perm_only",
        })
    }
}

impl FromStr for EncryptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "on" => Ok(Self::On),
            "perm_only" => Ok(Self::PermOnly),
            _ => Err(Error::Parse(format!("encryption must be on, off or perm_only, got {s:?}"))),
        }
    }
}

/// Plain-text `key=value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub encryption: EncryptionMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                hidden: 128,
                depth: 4,
                kernel: 5,
                patch: 4,
                n_classes: 10,
                image_size: 32,
                use_adaptive_matrix: true,
                lambda: 1e-4,
            },
            epochs: 60,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            encryption: EncryptionMode::Off,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("bad value for {key}: {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean for {key}: {v:?}"))),
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Parse(format!("duplicate key {k}")));
            }
            let m = &mut cfg.model;
            match k {
                "h" => m.hidden = num(k, v)?,
                "d" => m.depth = num(k, v)?,
                "k" => m.kernel = num(k, v)?,
                "M" => m.patch = num(k, v)?,
                "image_size" => m.image_size = num(k, v)?,
                "n_classes" => m.n_classes = num(k, v)?,
                "lambda" => m.lambda = num(k, v)?,
                "use_adaptive_matrix" => m.use_adaptive_matrix = boolean(k, v)?,
                "epochs" => cfg.epochs = num(k, v)?,
                "lr" => cfg.lr = num(k, v)?,
                "batch_size" => cfg.batch_size = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                "encryption" => cfg.encryption = v.parse()?,
                _ => return Err(Error::Parse(format!("unknown config key {k:?}"))),
            }
        }
        cfg.model.validate()?;
        if cfg.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(invalid("lr must be finite and >= 0"));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "h={}\nd={}\nk={}\nM={}\nimage_size={}\nn_classes={}\nlambda={}\nuse_adaptive_matrix={}\n\
             epochs={}\nlr={}\nbatch_size={}\nseed={}\nencryption={}\n",
            m.hidden,
            m.depth,
            m.kernel,
            m.patch,
            m.image_size,
            m.n_classes,
            m.lambda,
            m.use_adaptive_matrix,
            self.epochs,
            self.lr,
            self.batch_size,
            self.seed,
            self.encryption
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.hidden = 32;
        cfg.encryption = EncryptionMode::PermOnly;
        cfg.lr = 0.003;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn run_config_errors() {
        assert!(RunConfig::parse("h=4\nh=5\n").is_err());
        assert!(RunConfig::parse("bogus=1\n").is_err());
        assert!(RunConfig::parse("k=4\n").is_err());
        assert!(RunConfig::parse("M=5\n").is_err());
        assert!(RunConfig::parse("lambda=-1\n").is_err());
        assert!(RunConfig::parse("encryption=maybe\n").is_err());
        assert!(RunConfig::parse("h\n").is_err());
        let cfg = RunConfig::parse("# comment\nh = 16 # trailing\n\n").unwrap();
        assert_eq!(cfg.model.hidden, 16);
    }
}
