//! Safetensors checkpoints: named `f32` tensors plus string metadata holding
//! the model configuration, block table and optional training state.

use super::{BlockSpec, ModelConfig, ModelError, StairNet};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "stairnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const KEY_FORMAT: &str = "format";
const KEY_VERSION: &str = "version";
const KEY_CONFIG: &str = "model_config";
const KEY_BLOCKS: &str = "block_table";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A checkpoint read into memory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blocks: Vec<BlockSpec>,
    /// Tensor name to (shape, values).
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    /// Metadata entries other than the format, version, config and block table.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Builds a model with these weights.
    pub fn to_model(&self) -> Result<StairNet, CheckpointError> {
        let mut model = StairNet::new(self.config.clone())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies weights into `model`, which must have the same configuration.
    pub fn load_into(&self, model: &mut StairNet) -> Result<(), CheckpointError> {
        if *model.config() != self.config {
            return Err(CheckpointError::Mismatch(format!(
                "model config {:?} vs checkpoint config {:?}",
                model.config(),
                self.config
            )));
        }
        if model.config().block_specs() != self.blocks {
            return Err(CheckpointError::Mismatch("block table differs".into()));
        }
        let mut problem = None;
        let mut seen = 0;
        model.visit_params(&mut |name, p| {
            match self.tensors.get(name) {
                Some((shape, values)) if *shape == p.shape => {
                    p.value.copy_from_slice(values);
                    seen += 1;
                }
                Some((shape, _)) => {
                    problem.get_or_insert(format!("{name}: shape {shape:?} vs {:?}", p.shape));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor {name}"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(CheckpointError::Mismatch(p));
        }
        let model_tensors = self.tensors.keys().filter(|k| !k.starts_with("optim.")).count();
        if model_tensors != seen {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {model_tensors} model tensors, model has {seen}"
            )));
        }
        Ok(())
    }

    /// Tensors stored under `prefix.`, keyed by the remainder of the name.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Vec<f32>> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, (_, v))| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes every model parameter and buffer, plus `extra` tensors (for
/// example optimizer moments) and `metadata` entries.
pub fn save_checkpoint(
    path: &Path,
    model: &mut StairNet,
    extra: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit_params(&mut |name, p| owned.push((name.to_string(), p.shape.clone(), to_bytes(&p.value))));
    for (name, (shape, values)) in extra {
        owned.push((name.clone(), shape.clone(), to_bytes(values)));
    }
    let format_err = |message: String| CheckpointError::Format {
        path: path.to_path_buf(),
        message,
    };
    let views = owned
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| format_err(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    meta.insert(KEY_FORMAT.into(), CHECKPOINT_FORMAT.into());
    meta.insert(KEY_VERSION.into(), CHECKPOINT_VERSION.to_string());
    meta.insert(
        KEY_CONFIG.into(),
        serde_json::to_string(model.config()).expect("config serializes"),
    );
    meta.insert(
        KEY_BLOCKS.into(),
        serde_json::to_string(&model.config().block_specs()).expect("blocks serialize"),
    );
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CheckpointError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| format_err(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let format_err = |message: String| CheckpointError::Format {
        path: path.to_path_buf(),
        message,
    };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| format_err(e.to_string()))?;
    let mut meta: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if meta.remove(KEY_FORMAT).as_deref() != Some(CHECKPOINT_FORMAT) {
        return Err(format_err("not a stairnet checkpoint".into()));
    }
    let version = meta.remove(KEY_VERSION).unwrap_or_default();
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(format_err(format!("unsupported checkpoint version {version:?}")));
    }
    let config: ModelConfig = serde_json::from_str(&meta.remove(KEY_CONFIG).unwrap_or_default())
        .map_err(|e| format_err(format!("model config: {e}")))?;
    let blocks: Vec<BlockSpec> = serde_json::from_str(&meta.remove(KEY_BLOCKS).unwrap_or_default())
        .map_err(|e| format_err(format!("block table: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| format_err(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(format_err(format!("{name}: expected f32, found {:?}", view.dtype())));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (view.shape().to_vec(), values));
    }
    Ok(Checkpoint {
        config,
        blocks,
        tensors,
        metadata: meta,
    })
}
