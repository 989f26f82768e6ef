use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Dataset directory with a manifest, as written by `write_dataset`.
    pub stimulus_dir: PathBuf,
    pub stimulus_set_id: String,
    /// Reveal disk radius in image pixels.
    pub reveal_radius: f64,
    /// Box-blur kernel for the blurred rendition; scaled from 70 at 224 px when unset.
    pub blur_k: Option<usize>,
    pub block_count: usize,
    /// Per-session journals; sessions are kept in memory only when unset.
    pub journal_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            stimulus_dir: PathBuf::from("data/stimuli"),
            stimulus_set_id: "default".into(),
            reveal_radius: 6.0,
            blur_k: None,
            block_count: 4,
            journal_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.reveal_radius > 0.0 && self.reveal_radius.is_finite()) {
            return Err(ServiceError::Config(
                "reveal_radius must be positive".into(),
            ));
        }
        if self.block_count == 0 {
            return Err(ServiceError::Config(
                "block_count must be at least 1".into(),
            ));
        }
        if self.blur_k == Some(0) {
            return Err(ServiceError::Config("blur_k must be at least 1".into()));
        }
        if self.stimulus_set_id.is_empty() {
            return Err(ServiceError::Config(
                "stimulus_set_id must not be empty".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg =
            ServiceConfig::from_toml_str("port = 9000\nstimulus_dir = \"faces\"\nblur_k = 21\n")
                .unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.blur_k, Some(21));
        assert_eq!(cfg.block_count, 4);
        assert!(ServiceConfig::from_toml_str("prot = 1").is_err());
        assert!(ServiceConfig::from_toml_str("block_count = 0").is_err());
    }
}
