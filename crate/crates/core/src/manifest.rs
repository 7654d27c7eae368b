//! Run manifests embedded in every artifact.
//!
//! The embedded copy leaves `wall_time_ms` empty so that reruns stay
//! byte-identical; the measured time goes into a `.run.json` sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Short content id over the tool version, command, config and inputs.
    pub artifact_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_ms: Option<u64>,
    pub tool_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    /// `input_digests` should be content hashes of the input files, in order.
    pub fn new(
        command: &str,
        config_text: &str,
        seed: u64,
        inputs: Vec<PathBuf>,
        input_digests: &[String],
        outputs: Vec<PathBuf>,
    ) -> Self {
        let config_hash = sha256_hex(config_text.as_bytes());
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let mut h = Sha256::new();
        for part in [tool_version.as_str(), command, config_hash.as_str(), &seed.to_string()] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for d in input_digests {
            h.update(d.as_bytes());
            h.update([0]);
        }
        let artifact_version = hex::encode(h.finalize())[..12].to_string();
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            artifact_version,
            inputs,
            outputs,
            wall_time_ms: None,
            tool_version,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }

    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Same manifest apart from timing.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_time_ms = None;
        b.wall_time_ms = None;
        a == b
    }

    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }

    pub fn write_sidecar(&self, artifact: &Path, wall_time_ms: u64) -> Result<()> {
        let mut m = self.clone();
        m.wall_time_ms = Some(wall_time_ms);
        std::fs::write(Self::sidecar_path(artifact), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}
