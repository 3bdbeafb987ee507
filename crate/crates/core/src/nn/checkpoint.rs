use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::TensorDoc;
use super::network::{ModelArchitecture, Network};
use crate::error::{Error, Result};
use crate::format::{self, FORMAT_VERSION};

/// One training phase that contributed to a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub regime: String,
    pub dataset_id: String,
    pub epochs: usize,
    pub seed: u64,
}

/// Which data trained which model. `phases` lists earlier phases (for example
/// the original model a fine-tune started from, or a pre-training phase).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub regime: String,
    pub dataset_id: String,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub phases: Vec<PhaseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl Provenance {
    pub fn new(regime: &str, dataset_id: &str, epochs: usize, seed: u64) -> Self {
        Self {
            regime: regime.to_string(),
            dataset_id: dataset_id.to_string(),
            epochs,
            seed,
            phases: Vec::new(),
            config_hash: None,
        }
    }

    pub fn as_phase(&self) -> PhaseRecord {
        PhaseRecord {
            regime: self.regime.clone(),
            dataset_id: self.dataset_id.clone(),
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub network: Network,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    architecture: ModelArchitecture,
    layers: Vec<TensorDoc>,
    provenance: Provenance,
}

impl ModelCheckpoint {
    pub fn architecture(&self) -> &ModelArchitecture {
        &self.network.architecture
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        if !self.network.is_finite() {
            return Err(Error::Invariant("refusing to save a non-finite checkpoint".into()));
        }
        let doc = CheckpointDoc {
            format_version: FORMAT_VERSION,
            architecture: self.network.architecture.clone(),
            layers: self.network.layers.iter().map(TensorDoc::from).collect(),
            provenance: self.provenance.clone(),
        };
        format::to_json_bytes(&doc)
    }

    /// Parses and fully validates a checkpoint; nothing is returned on any inconsistency.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_slice(bytes)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::load(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        doc.architecture
            .validate()
            .map_err(|e| Error::load("architecture", e.to_string()))?;
        let shapes = doc.architecture.layer_shapes();
        if shapes.len() != doc.layers.len() {
            return Err(Error::load(
                "layers",
                format!("{} layers, architecture implies {}", doc.layers.len(), shapes.len()),
            ));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, (t, (fan_in, fan_out))) in doc.layers.into_iter().zip(shapes).enumerate() {
            if (t.fan_in, t.fan_out) != (fan_in, fan_out) {
                return Err(Error::load(
                    format!("layers[{i}].fan_in/fan_out"),
                    format!(
                        "({}, {}) but architecture implies ({fan_in}, {fan_out})",
                        t.fan_in, t.fan_out
                    ),
                ));
            }
            layers.push(t.into_dense(&format!("layers[{i}]"))?);
        }
        Ok(Self {
            network: Network {
                architecture: doc.architecture,
                layers,
            },
            provenance: doc.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::atomic_write(path, &self.to_json_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_bytes(&format::read_file(path)?)
    }
}
