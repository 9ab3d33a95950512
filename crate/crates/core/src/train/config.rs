//! Training configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! batch_size = 256
//! learning_rate = 1e-3
//! epochs = 10
//! samples_per_epoch = 32768
//! k_neighbors = 256
//! jet_order = 3
//! seed = 0
//! alpha1 = 1.0          # consistency term
//! alpha2 = 0.1          # transform regularizer
//! ridge = 1e-8
//! epsilon = 1e-4        # weight floor, overrides arch.epsilon
//! log_term = true       # keep −Σ log w in the consistency term
//! val_fraction = 0.1
//! val_samples = 1024
//!
//! [arch]
//! point = [64, 64]
//! global = [128, 1024]
//! head = [512, 256, 128]
//! tnet_conv = [64, 128, 1024]
//! tnet_fc = [512, 256]
//! input_transform = true
//! feature_transform = true
//! batch_norm = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::jet::{JetOrder, DEFAULT_RIDGE};
use crate::weightnet::{NetArch, DEFAULT_EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub k_neighbors: usize,
    pub jet_order: u8,
    pub seed: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub ridge: f64,
    pub epsilon: f64,
    pub log_term: bool,
    /// Share of each shape's points held out for validation.
    pub val_fraction: f64,
    /// Upper bound on validation queries scored per epoch.
    pub val_samples: usize,
    pub arch: NetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            epochs: 10,
            samples_per_epoch: 32768,
            k_neighbors: 256,
            jet_order: 3,
            seed: 0,
            alpha1: 1.0,
            alpha2: 0.1,
            ridge: DEFAULT_RIDGE,
            epsilon: DEFAULT_EPSILON,
            log_term: true,
            val_fraction: 0.1,
            val_samples: 1024,
            arch: NetArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn order(&self) -> Result<JetOrder> {
        JetOrder::new(self.jet_order)
    }

    /// Architecture with the configured weight floor applied.
    pub fn net_arch(&self) -> NetArch {
        NetArch {
            epsilon: self.epsilon,
            ..self.arch.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("samples_per_epoch", self.samples_per_epoch),
            ("val_samples", self.val_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let order = self.order().map_err(|e| Error::Config(e.to_string()))?;
        if self.k_neighbors < order.num_coeffs() {
            return Err(Error::Config(format!(
                "k_neighbors = {} is below the {} coefficients of an order-{} jet",
                self.k_neighbors,
                order.num_coeffs(),
                order
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        self.loss_weights().validate()?;
        self.net_arch().validate()
    }
}
