//! Experiment configuration, read from TOML with a strict schema.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected. See `configs/default.toml` for the full annotated layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::LocalSettings;
use crate::losses::LossConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {0} not found")]
    Missing(PathBuf),

    #[error("cannot read config file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("syntax error in config: {0}")]
    Syntax(String),

    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("constraint violated by `{key}`: {reason}")]
    Constraint { key: String, reason: String },
}

impl ConfigError {
    /// Dotted path of the offending key, when the error has one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key }
            | ConfigError::InvalidValue { key, .. }
            | ConfigError::Constraint { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub federation: FederationConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Identities generated.
    pub k_total: usize,
    /// Identities in the shared set.
    pub k_global: usize,
    pub clients: usize,
    /// Identities per client.
    pub k_local: usize,
    pub n_per_id: usize,
    pub train_fraction: f64,
    pub input_dim: usize,
    /// Within-identity noise scale.
    pub sigma_intra: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            k_total: 80,
            k_global: 40,
            clients: 8,
            k_local: 5,
            n_per_id: 33,
            train_fraction: 0.6,
            input_dim: 32,
            sigma_intra: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Output width of the personalized transform.
    pub dfc_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64],
            embed_dim: 16,
            dfc_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub t_hn: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Write a global checkpoint every this many rounds; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 30,
            local_epochs: 4,
            lr: 0.05,
            weight_decay: 5e-4,
            t_hn: 0.4,
            batch_size: 32,
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub far_levels: Vec<f64>,
    pub fpir_levels: Vec<f64>,
    /// Imposter pairs scored per client in personalized verification.
    pub imposter_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            far_levels: vec![1e-3, 1e-2],
            fpir_levels: vec![1e-2, 1e-1],
            imposter_cap: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_shared_data: bool,
    pub use_hard_negatives: bool,
    pub use_contrastive: bool,
    pub use_dfc: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        AblationFlags {
            use_shared_data: true,
            use_hard_negatives: true,
            use_contrastive: true,
            use_dfc: true,
        }
    }

    pub fn baseline() -> Self {
        AblationFlags {
            use_shared_data: false,
            use_hard_negatives: false,
            use_contrastive: false,
            use_dfc: false,
        }
    }
}

fn constraint(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn check_levels(key: &str, levels: &[f64]) -> Result<(), ConfigError> {
    if levels.is_empty() {
        return Err(constraint(key, "at least one level is required"));
    }
    if levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
        return Err(constraint(key, format!("levels must lie in (0, 1], got {levels:?}")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(constraint(key, format!("levels must be strictly increasing, got {levels:?}")));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                ConfigError::Missing(path.to_path_buf())
            } else {
                ConfigError::Unreadable {
                    path: path.to_path_buf(),
                    source,
                }
            }
        })?;
        Self::parse(&text)
    }

    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().message().to_string();
            if let Some(rest) = message.strip_prefix("unknown field `") {
                let field = rest.split('`').next().unwrap_or_default();
                let key = if path.is_empty() || path == "." || path.ends_with(field) {
                    path.trim_start_matches('.').to_string()
                } else {
                    format!("{path}.{field}")
                };
                ConfigError::UnknownKey { key }
            } else {
                ConfigError::InvalidValue { key: path, message }
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.clients == 0 {
            return Err(constraint("data.clients", "at least one client is required"));
        }
        if d.k_local == 0 {
            return Err(constraint("data.k_local", "clients need at least one identity"));
        }
        if d.k_global + d.clients * d.k_local > d.k_total {
            return Err(constraint(
                "data.k_total",
                format!(
                    "{} identities cannot cover {} shared + {}×{} local",
                    d.k_total, d.k_global, d.clients, d.k_local
                ),
            ));
        }
        if d.n_per_id < 2 {
            return Err(constraint("data.n_per_id", "need at least 2 samples per identity"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(constraint("data.train_fraction", "must lie in (0, 1)"));
        }
        if d.input_dim == 0 {
            return Err(constraint("data.input_dim", "must be positive"));
        }
        if !(d.sigma_intra > 0.0 && d.sigma_intra < 1.0) {
            return Err(constraint("data.sigma_intra", "must lie in (0, 1)"));
        }
        let m = &self.model;
        if m.hidden_dims.contains(&0) {
            return Err(constraint("model.hidden_dims", "layer widths must be positive"));
        }
        if m.embed_dim == 0 {
            return Err(constraint("model.embed_dim", "must be positive"));
        }
        if m.dfc_dim == 0 {
            return Err(constraint("model.dfc_dim", "must be positive"));
        }
        if let Some((key, reason)) = self.loss.violation() {
            return Err(constraint(&format!("loss.{key}"), reason));
        }
        let f = &self.federation;
        if f.local_epochs == 0 {
            return Err(constraint("federation.local_epochs", "must be positive"));
        }
        for (key, v) in [
            ("federation.lr", f.lr),
            ("federation.weight_decay", f.weight_decay),
            ("federation.pretrain_lr", f.pretrain_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(constraint(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(f.t_hn > -1.0 && f.t_hn < 1.0) {
            return Err(constraint("federation.t_hn", format!("must lie in (-1, 1), got {}", f.t_hn)));
        }
        if f.batch_size == 0 {
            return Err(constraint("federation.batch_size", "must be positive"));
        }
        check_levels("eval.far_levels", &self.eval.far_levels)?;
        check_levels("eval.fpir_levels", &self.eval.fpir_levels)?;
        if self.eval.imposter_cap == 0 {
            return Err(constraint("eval.imposter_cap", "must be positive"));
        }
        if self.ablation.use_hard_negatives && !self.ablation.use_shared_data {
            return Err(constraint(
                "ablation.use_hard_negatives",
                "hard-negative selection requires use_shared_data",
            ));
        }
        Ok(())
    }

    /// Local-round settings derived from the federation, loss and ablation blocks.
    pub fn local_settings(&self) -> LocalSettings {
        LocalSettings {
            epochs: self.federation.local_epochs,
            lr: self.federation.lr,
            weight_decay: self.federation.weight_decay,
            batch_size: self.federation.batch_size,
            loss: self.loss.clone(),
            use_shared_data: self.ablation.use_shared_data,
            use_contrastive: self.ablation.use_contrastive,
            use_dfc: self.ablation.use_dfc,
        }
    }
}
