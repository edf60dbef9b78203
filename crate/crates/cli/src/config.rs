//! Experiment configuration shared by all commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clock_hz: f64,
    pub mac_count: u64,
    pub lanes: usize,
    /// Per-hop sample sizes, input layer first.
    pub fan_outs: Vec<usize>,
    pub hidden: usize,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            clock_hz: gcnfabric::netsim::DEFAULT_CLOCK_HZ,
            mac_count: gcnfabric::netsim::DEFAULT_MAC_COUNT,
            lanes: gcnfabric::netsim::PAYLOAD_LANES,
            fan_outs: vec![25, 10],
            hidden: 256,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(CliError::Usage(format!("clock_hz must be positive, got {}", self.clock_hz)));
        }
        if self.mac_count == 0 || self.lanes == 0 || self.hidden == 0 {
            return Err(CliError::Usage("mac_count, lanes and hidden must be positive".into()));
        }
        if self.fan_outs.is_empty() || self.fan_outs.contains(&0) {
            return Err(CliError::Usage("fan_outs must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// Short SHA-256 digest of the resolved configuration and command parameters.
    pub fn hash(&self, command: &impl Serialize) -> String {
        let bytes = serde_json::to_vec(&(self, command)).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.clock_hz, 2.5e8);
        assert_eq!(c.mac_count, 256);
        assert_eq!(c.lanes, 16);
        assert_eq!(c.fan_outs, vec![25, 10]);
        assert_eq!(c.hidden, 256);
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "hidden": 32}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.hidden, 32);
        assert_eq!(c.mac_count, 256);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn hash_tracks_inputs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(&"x"), b.hash(&"x"));
        assert_ne!(a.hash(&"x"), a.hash(&"y"));
        b.seed = 1;
        assert_ne!(a.hash(&"x"), b.hash(&"x"));
        assert_eq!(a.hash(&"x").len(), 16);
    }
}
