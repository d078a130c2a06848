//! Self-describing checkpoint container.
//!
//! Layout: the magic `IMAECKPT`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then every tensor as little-endian `f64`
//! values in the order listed by the header. The header echoes the run
//! configuration and carries the generator state and counters.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{ImaeError, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"IMAECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    pub model: BackboneConfig,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub rng: Option<ChaCha8Rng>,
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: String,
    model: BackboneConfig,
    config: serde_json::Value,
    epoch: u64,
    step: u64,
    rng: Option<ChaCha8Rng>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(phase: impl Into<String>, model: BackboneConfig, params: ParamStore) -> Self {
        Self {
            phase: phase.into(),
            model,
            config: serde_json::Value::Null,
            params,
            optimizer: None,
            rng: None,
            epoch: 0,
            step: 0,
        }
    }

    fn groups(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut g = vec![("params", &self.params)];
        if let Some(opt) = &self.optimizer {
            g.push(("adam_m", &opt.m));
            g.push(("adam_v", &opt.v));
        }
        g
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        for (group, store) in self.groups() {
            for (name, m) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                });
            }
        }
        let header = Header {
            phase: self.phase.clone(),
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.params.num_values() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, store) in self.groups() {
            for (_, m) in store.iter() {
                for v in m.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ImaeError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an i-MAE checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ImaeError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            pos += 8 * n;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mat = Array2::from_shape_vec((t.rows, t.cols), values).map_err(|e| bad(&e.to_string()))?;
            match t.group.as_str() {
                "params" => params.insert(t.name.clone(), mat),
                "adam_m" => m.insert(t.name.clone(), mat),
                "adam_v" => v.insert(t.name.clone(), mat),
                other => return Err(ImaeError::Checkpoint(format!("unknown tensor group {other}"))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let optimizer = header.optimizer.map(|o| AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
            m,
            v,
        });
        Ok(Self {
            phase: header.phase,
            model: header.model,
            config: header.config,
            params,
            optimizer,
            rng: header.rng,
            epoch: header.epoch,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| {
            ImaeError::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, Profile};
    use rand::SeedableRng;

    #[test]
    fn roundtrip_preserves_everything() {
        let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_backbone(&model, &mut rng);
        let mut opt = AdamW::new(0.9, 0.95, 0.05);
        opt.apply(&mut params.clone(), &params, 1e-3);
        let ck = Checkpoint {
            phase: "imae_pretrain".into(),
            model,
            config: serde_json::json!({"train": {"seed": 3}}),
            params,
            optimizer: Some(opt),
            rng: Some(rng),
            epoch: 2,
            step: 17,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(file_digest(&path).unwrap().len(), 64);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let model = BackboneConfig::from_profile(Profile::Nano, 16, 0.75);
        let mut bytes = Checkpoint::new("x", model, ParamStore::new()).to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
