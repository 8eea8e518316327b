//! Versioned checkpoint: configuration, every parameter, the mask store,
//! and the attention parameters, as one JSON document guarded by a magic
//! string. f64 values round-trip exactly through serde_json.

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::masks::MaskStore;
use crate::model::AdapterModel;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &str = "CLASSIC-CKPT-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub run_config: RunConfig,
    pub sequence_seed: u64,
    /// Task names in training order; position = task id in the mask store.
    pub task_names: Vec<String>,
    pub model: AdapterModel,
    pub mask_store: MaskStore,
    pub attention: AttentionParams,
}

impl Checkpoint {
    pub fn new(
        run_config: RunConfig,
        sequence_seed: u64,
        task_names: Vec<String>,
        model: AdapterModel,
        mask_store: MaskStore,
        attention: AttentionParams,
    ) -> Self {
        Checkpoint {
            magic: MAGIC.to_string(),
            run_config,
            sequence_seed,
            task_names,
            model,
            mask_store,
            attention,
        }
    }
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    // check the magic before attempting a full decode so a wrong or
    // corrupt file fails with a version error, not a schema error
    let probe: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
    match probe.get("magic").and_then(|m| m.as_str()) {
        Some(m) if m == MAGIC => {}
        Some(m) => {
            return Err(Error::Checkpoint(format!("bad magic {m:?}, expected {MAGIC:?}")));
        }
        None => return Err(Error::Checkpoint("missing magic string".into())),
    }
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("decode: {e}")))
}
