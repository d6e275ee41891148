//! Self-describing checkpoint files: safetensors payload, JSON metadata and a
//! sha256 digest over both. Any mismatch refuses the load.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::TrainConfig;

pub const FORMAT: &str = "hearnet-checkpoint";
pub const VERSION: u32 = 1;
/// Single header key so the serialized header is byte-deterministic.
const META_KEY: &str = "hearnet";

#[derive(Serialize, Deserialize)]
struct Envelope {
    sha256: String,
    meta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Epoch in progress (1-based) and the number of its batches already done.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: u64,
    pub adam_g_t: u64,
    pub adam_d_t: u64,
    pub best_oracle: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            model,
            train: None,
            epoch: 1,
            batch_in_epoch: 0,
            step: 0,
            adam_g_t: 0,
            adam_d_t: 0,
            best_oracle: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn st_dtype(d: DType) -> Result<Dtype> {
    match d {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

fn digest(meta_json: &str, blobs: &BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>) -> String {
    let mut h = Sha256::new();
    h.update(meta_json.as_bytes());
    for (name, (dtype, shape, data)) in blobs {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(format!("{dtype:?}").as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(data);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = BTreeMap::new();
        for (name, t) in &self.tensors {
            blobs.insert(name.clone(), (st_dtype(t.dtype())?, t.dims().to_vec(), to_bytes(t)?));
        }
        let meta_json = serde_json::to_string(&self.meta)?;
        let env = Envelope {
            sha256: digest(&meta_json, &blobs),
            meta: meta_json,
        };
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&env)?)]);
        let views = blobs
            .iter()
            .map(|(k, (d, s, b))| Ok((k.clone(), TensorView::new(*d, s.clone(), b)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(safetensors::serialize(views, Some(info))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(format!("unreadable container: {e}")))?;
        let (_, md) = SafeTensors::read_metadata(bytes).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let info = md.metadata().as_ref().ok_or_else(|| bad("missing metadata".into()))?;
        let env = info.get(META_KEY).ok_or_else(|| bad("missing run metadata".into()))?;
        let env: Envelope = serde_json::from_str(env).map_err(|e| bad(format!("bad metadata: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&env.meta).map_err(|e| bad(format!("bad metadata: {e}")))?;
        if meta.format != FORMAT || meta.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", meta.format, meta.version)));
        }
        let mut blobs = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            blobs.insert(name.clone(), (view.dtype(), view.shape().to_vec(), view.data().to_vec()));
            tensors.insert(name, from_view(&view)?);
        }
        if digest(&env.meta, &blobs) != env.sha256 {
            return Err(bad("digest mismatch: file is corrupt".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Tensors under `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("g.a".to_string(), Tensor::new(&[1.5f32, -2.25, 3.0], &Device::Cpu).unwrap());
        tensors.insert("d.b".to_string(), Tensor::new(&[[0.1f64, 0.2], [0.3, 0.4]], &Device::Cpu).unwrap());
        let mut meta = CheckpointMeta::new(ModelConfig::tiny());
        meta.step = 17;
        meta.best_oracle = Some(0.123456789012345);
        Checkpoint { meta, tensors }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for (k, t) in &c.tensors {
            let b = &back.tensors[k];
            assert_eq!(b.dtype(), t.dtype());
            assert_eq!(to_bytes(b).unwrap(), to_bytes(t).unwrap());
        }
        for _ in 0..8 {
            assert_eq!(c.to_bytes().unwrap(), back.to_bytes().unwrap());
        }
    }

    #[test]
    fn any_flipped_byte_is_refused() {
        let bytes = sample().to_bytes().unwrap();
        for pos in [bytes.len() - 1, bytes.len() - 20, bytes.len() / 2, 12] {
            let mut b = bytes.clone();
            b[pos] ^= 0x01;
            assert!(Checkpoint::from_bytes(&b).is_err(), "flip at {pos} accepted");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
