use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dataio::Task;
use crate::diffcore::ParameterStore;
use crate::error::{Error, Result};
use crate::evidence::{Model, ModelConfig};
use crate::textio::{PretrainedVectors, Vocabulary};

pub const FORMAT: &str = "evidentia-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Version of the library that wrote the file.
    pub library: String,
    pub task: Option<Task>,
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Everything needed to rebuild a trained model. Fixed vectors are stored
/// only for vocabulary tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub metadata: CheckpointMeta,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub vocabulary: serde_json::Value,
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn new(model: &Model, training: &TrainConfig, metadata: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            metadata,
            model: model.config().clone(),
            training: training.clone(),
            vocabulary: model.vocab().to_value(),
            vectors: model
                .vectors()
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_vec()))
                .collect(),
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let vocab = Vocabulary::from_value(self.vocabulary.clone())?;
        let mut vectors = PretrainedVectors::new(self.model.dim);
        for (k, v) in &self.vectors {
            vectors.insert(k.clone(), v.clone())?;
        }
        Model::from_parts(self.model.clone(), vocab, vectors, self.params.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::json("reading checkpoint header", e))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}, expected {FORMAT} v{VERSION}",
                header.format, header.version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::json("parsing checkpoint", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}
