use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const FORMAT: u32 = 1;

/// Trained parameters with everything needed to rebuild and verify the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ModelConfig,
    /// Fingerprint of the processed dataset the parameters were trained on.
    pub dataset_fingerprint: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    /// SHA-256 of the serialized `params`.
    pub params_sha256: String,
    pub params: ModelParams,
}

fn params_digest(params: &ModelParams) -> Result<String> {
    let bytes = serde_json::to_vec(params).map_err(|e| Error::Serde(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        params: ModelParams,
        dataset_fingerprint: String,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        Ok(Checkpoint {
            format: FORMAT,
            config,
            dataset_fingerprint,
            epoch,
            metrics,
            params_sha256: params_digest(&params)?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and verifies the parameter hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Integrity(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                ck.format
            )));
        }
        let digest = params_digest(&ck.params)?;
        if digest != ck.params_sha256 {
            return Err(Error::Integrity(format!(
                "{}: parameter hash {digest} does not match recorded {}",
                path.display(),
                ck.params_sha256
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn verify_dataset(&self, fingerprint: &str) -> Result<()> {
        if self.dataset_fingerprint == fingerprint {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                expected: self.dataset_fingerprint.clone(),
                found: fingerprint.to_owned(),
            })
        }
    }
}
