//! JSON model checkpoints.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "seqrec-checkpoint",
//!   "version": 1,
//!   "config": { ...model config... },
//!   "num_items": 200,
//!   "dataset": "runs/data/dataset.json",
//!   "params": [ { "name": "item_emb", "shape": [201, 32], "values": [...] }, ... ]
//! }
//! ```
//!
//! Values are written as `f64` with shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter bit for bit (for `f32` models
//! too, since `f32 -> f64` is exact).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "seqrec-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn from_store<S: Scalar>(store: &ParamStore<S>) -> Vec<NamedTensor> {
        store
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.to_f64_vec(),
            })
            .collect()
    }

    pub fn to_store<S: Scalar>(list: &[NamedTensor]) -> Result<ParamStore<S>> {
        let mut store = ParamStore::new();
        for t in list {
            store.add(t.name.clone(), Tensor::from_f64(t.shape.clone(), &t.values)?)?;
        }
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub num_items: usize,
    /// Dataset the model was trained on, if known.
    #[serde(default)]
    pub dataset: Option<String>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &Model<S>, dataset: Option<String>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            num_items: model.num_items(),
            dataset,
            params: NamedTensor::from_store(model.params()),
        }
    }

    pub fn to_model<S: Scalar>(&self) -> Result<Model<S>> {
        let store = NamedTensor::to_store(&self.params)?;
        Model::from_parts(self.config.clone(), self.num_items, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::data(format!(
                "{}: not a {FORMAT} v{VERSION} file (found {} v{})",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}
