//! Self-describing binary container for models and latents.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 8     | magic `AVFLOWCK`                                     |
//! | 4     | format version, `u32` (currently 1)                  |
//! | 8     | header length `n`, `u64`                             |
//! | n     | UTF-8 JSON header                                    |
//! | 8·k   | tensor data, `f64` values in header table order      |
//! | 32    | SHA-256 of every preceding byte                      |
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "shape"}, ...]}`;
//! tensor `i` occupies the next `Π shape` values of the data section. Model
//! files put `{"kind": "model", "config": ..., "lora": ...}` in `meta`,
//! latent files put `{"kind": "latent"}` and tensors `audio`, `video`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::JointLatent;
use crate::model::{LoraSpec, Model, ModelConfig, Stage};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVFLOWCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named `f64` tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

fn format_err<S: Into<String>>(msg: S) -> Error {
    Error::Format(msg.into())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(60 + json.len() + 8 * self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(format_err("truncated container"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| format_err("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[20..data_start])?;
        let mut values = body[data_start..].chunks_exact(8);
        if values.len() * 8 != body.len() - data_start {
            return Err(format_err("data section is not a whole number of f64 values"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if values.len() < n {
                return Err(format_err(format!("tensor {} runs past the data section", entry.name)));
            }
            let data: Vec<f64> = values
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if values.len() != 0 {
            return Err(format_err("trailing data after the last tensor"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|k| k.as_str())
    }

    fn take(&mut self, name: &str) -> Result<Tensor<f64>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.as_f64()).collect()).expect("same shape")
}

fn from_f64<T: Real>(t: &Tensor<f64>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| T::lit(x)).collect()).expect("same shape")
}

pub fn model_container<T: Real>(model: &Model<T>) -> Container {
    Container {
        meta: serde_json::json!({
            "kind": "model",
            "config": model.config(),
            "lora": model.lora(),
        }),
        tensors: model.params().iter().map(|p| (p.name.clone(), to_f64(&p.tensor))).collect(),
    }
}

/// Rebuilds a model; it comes back with the `AvSft` trainable set.
pub fn model_from_container<T: Real>(c: &Container) -> Result<Model<T>> {
    if c.kind() != Some("model") {
        return Err(format_err("container does not hold a model"));
    }
    let cfg: ModelConfig = serde_json::from_value(c.meta.get("config").cloned().unwrap_or_default())?;
    let lora: Option<LoraSpec> = serde_json::from_value(c.meta.get("lora").cloned().unwrap_or_default())?;
    let mut store = ParamStore::new();
    for (name, t) in &c.tensors {
        store.insert(name.clone(), from_f64(t))?;
    }
    let mut model = Model::from_parts(cfg, store, lora)?;
    model.set_stage(Stage::AvSft);
    Ok(model)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    model_container(model).save(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    model_from_container(&Container::load(path)?)
}

pub fn latent_container<T: Real>(x: &JointLatent<T>) -> Container {
    Container {
        meta: serde_json::json!({ "kind": "latent" }),
        tensors: vec![("audio".into(), to_f64(&x.audio)), ("video".into(), to_f64(&x.video))],
    }
}

pub fn latent_from_container<T: Real>(mut c: Container) -> Result<JointLatent<T>> {
    if c.kind() != Some("latent") {
        return Err(format_err("container does not hold a latent"));
    }
    Ok(JointLatent {
        audio: from_f64(&c.take("audio")?),
        video: from_f64(&c.take("video")?),
    })
}

/// Content-addressed latent storage: each latent lives in
/// `<dir>/<sha256 of its container bytes>.ckpt`.
#[derive(Clone, Debug)]
pub struct LatentStore {
    dir: PathBuf,
}

impl LatentStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.ckpt"))
    }

    /// Writes the latent (if not already present) and returns its hash.
    pub fn put<T: Real>(&self, x: &JointLatent<T>) -> Result<String> {
        let bytes = latent_container(x).to_bytes()?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let path = self.path(&hash);
        if !path.exists() {
            fs::write(&path, &bytes)?;
        }
        Ok(hash)
    }

    pub fn get<T: Real>(&self, hash: &str) -> Result<JointLatent<T>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format_err(format!("malformed latent reference {hash:?}")));
        }
        let bytes = fs::read(self.path(hash))?;
        if hex::encode(Sha256::digest(&bytes)) != hash {
            return Err(format_err(format!("latent {hash} does not match its content")));
        }
        latent_from_container(Container::from_bytes(&bytes)?)
    }
}
