//! Versioned JSON checkpoints.
//!
//! JSON keeps f64 values exact through serde's shortest-round-trip float
//! encoding, so save/load is bit-identical; tests rely on that.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaselineNet, EnsembleNet, EnsembleError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelKind {
    Baseline(BaselineNet),
    Ensemble(EnsembleNet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Root seed of the run that produced the model.
    pub seed: u64,
    #[serde(flatten)]
    pub model: ModelKind,
}

impl Checkpoint {
    pub fn baseline(seed: u64, net: BaselineNet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            model: ModelKind::Baseline(net),
        }
    }

    pub fn ensemble(seed: u64, net: EnsembleNet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed,
            model: ModelKind::Ensemble(net),
        }
    }

    pub fn as_ensemble(&self) -> Result<&EnsembleNet, EnsembleError> {
        match &self.model {
            ModelKind::Ensemble(net) => Ok(net),
            ModelKind::Baseline(_) => Err(EnsembleError::Inconsistent {
                detail: "expected an ensemble checkpoint, found a baseline".into(),
            }),
        }
    }

    pub fn as_baseline(&self) -> Result<&BaselineNet, EnsembleError> {
        match &self.model {
            ModelKind::Baseline(net) => Ok(net),
            ModelKind::Ensemble(_) => Err(EnsembleError::Inconsistent {
                detail: "expected a baseline checkpoint, found an ensemble".into(),
            }),
        }
    }

    fn validate(&self) -> Result<(), EnsembleError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(EnsembleError::UnsupportedVersion {
                got: self.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        match &self.model {
            ModelKind::Baseline(net) => net.validate(),
            ModelKind::Ensemble(net) => net.validate(),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), EnsembleError> {
    ckpt.validate()?;
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EnsembleError> {
    let text = std::fs::read_to_string(path)?;
    // Read the version before the full parse so an old file reports a
    // version error rather than a shape error.
    #[derive(Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = serde_json::from_str(&text)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(EnsembleError::UnsupportedVersion {
            got: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.validate()?;
    Ok(ckpt)
}
