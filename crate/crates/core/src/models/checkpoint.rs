use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView, View};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::IoContext;
use crate::tensor::{Scalar, Shape, Tensor};
use crate::{Error, Result};

/// Provenance stored in the safetensors header next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_spec: ModelSpec,
    pub seed: u64,
    pub config_hash: String,
    /// Digest of the stored values, see [`crate::nn::ParamStore::digest`].
    pub weights_digest: String,
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn dtype_of<T: Scalar>() -> Dtype {
    match T::DTYPE {
        "F64" => Dtype::F64,
        _ => Dtype::F32,
    }
}

/// Writes every tensor of the model (weights and running statistics).
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, config_hash: &str, path: &Path) -> Result<CheckpointMeta> {
    let meta = CheckpointMeta {
        model_spec: model.spec.clone(),
        seed: model.seed,
        config_hash: config_hash.to_string(),
        weights_digest: model.store.digest(),
    };
    let raws: Vec<(String, Raw)> = model
        .store
        .entries()
        .map(|(_, e)| {
            let mut bytes = Vec::new();
            T::write_le(e.value.data(), &mut bytes);
            (e.name.clone(), Raw { dtype: dtype_of::<T>(), shape: e.value.shape().dims().to_vec(), bytes })
        })
        .collect();
    let mut header = HashMap::new();
    header.insert("model_spec".to_string(), serde_json::to_string(&meta.model_spec)?);
    header.insert("seed".to_string(), meta.seed.to_string());
    header.insert("config_hash".to_string(), meta.config_hash.clone());
    header.insert("weights_digest".to_string(), meta.weights_digest.clone());
    let bytes = safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), &Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)?;
    Ok(meta)
}

fn parse_meta(header: Option<&HashMap<String, String>>) -> Result<CheckpointMeta> {
    let h = header.ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    let get = |k: &str| h.get(k).ok_or_else(|| Error::Checkpoint(format!("metadata key {k} missing")));
    Ok(CheckpointMeta {
        model_spec: serde_json::from_str(get("model_spec")?)?,
        seed: get("seed")?.parse().map_err(|_| Error::Checkpoint("seed is not an integer".into()))?,
        config_hash: get("config_hash")?.clone(),
        weights_digest: get("weights_digest")?.clone(),
    })
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, md) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    parse_meta(md.metadata().as_ref())
}

fn to_tensor<T: Scalar>(view: &TensorView<'_>, name: &str) -> Result<Tensor<T>> {
    let dims = view.shape();
    if dims.len() != 4 {
        return Err(Error::Checkpoint(format!("{name}: expected rank 4, got {dims:?}")));
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => f32::read_le(view.data()).into_iter().map(|v| T::c(v as f64)).collect(),
        Dtype::F64 => f64::read_le(view.data()).into_iter().map(T::c).collect(),
        d => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {d:?}"))),
    };
    Ok(Tensor::from_vec(shape, data))
}

/// Rebuilds the model described by the checkpoint and loads its values.
///
/// When `expect` is given the stored spec must match it exactly.
pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<&ModelSpec>) -> Result<(Model<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, md) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = parse_meta(md.metadata().as_ref())?;
    if let Some(spec) = expect {
        if *spec != meta.model_spec {
            return Err(Error::SpecMismatch(format!(
                "checkpoint holds {} but {} was requested",
                meta.model_spec.label(),
                spec.label()
            )));
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = Model::<T>::build(&meta.model_spec, meta.seed)?;
    let ids: Vec<_> = model.store.entries().map(|(id, e)| (id, e.name.clone(), e.value.shape())).collect();
    if st.names().len() != ids.len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", st.names().len(), ids.len())));
    }
    for (id, name, shape) in ids {
        let view = st.tensor(&name).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let t = to_tensor::<T>(&view, &name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!("{name}: stored {} vs model {shape}", t.shape())));
        }
        *model.store.value_mut(id) = t;
    }
    Ok((model, meta))
}
