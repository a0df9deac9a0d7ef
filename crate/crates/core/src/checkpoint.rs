//! Single-file checkpoint archive.
//!
//! ```text
//! "FBCK"  u32 version  u64 manifest_len  manifest (UTF-8)  payload
//! ```
//!
//! Manifest lines are tab separated:
//!
//! ```text
//! meta    <key>   <value>
//! tensor  <name>  <f32|f64>  <d0,d1,..>  <offset>  <nbytes>
//! blob    <name>  <offset>   <nbytes>
//! ```
//!
//! Offsets are relative to the start of the payload; all numbers are
//! little-endian. Model parameters keep their dotted names
//! (`denoiser.*`, `branch.*`, `aligner.*`); optimizer moments are stored as
//! `adam.m.<name>` / `adam.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::tensor_le_bytes;
use crate::train::{Adam, TrainState};

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks '{key}'")))?
            .parse()
            .map_err(|_| Error::data(format!("checkpoint '{key}' is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint lacks '{key}'")))?
            .parse()
            .map_err(|_| Error::data(format!("checkpoint '{key}' is not a number")))
    }

    pub fn step(&self) -> Result<u64> {
        self.meta_u64("step")
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_text(&self) -> Option<String> {
        self.blobs.get("config").map(|b| String::from_utf8_lossy(b).into_owned())
    }

    /// Collects model parameters, optimizer state and run metadata.
    pub fn capture(model: &Model, state: &TrainState, extra: &[(&str, String)], config_text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), state.step.to_string());
        meta.insert("adam.step".to_string(), state.adam.step.to_string());
        meta.insert("adam.lr".to_string(), format!("{:e}", state.adam.lr));
        meta.insert("adam.beta1".to_string(), state.adam.beta1.to_string());
        meta.insert("adam.beta2".to_string(), state.adam.beta2.to_string());
        meta.insert("adam.eps".to_string(), format!("{:e}", state.adam.eps));
        for (k, v) in extra {
            if k.contains(['\t', '\n']) || v.contains(['\t', '\n']) {
                return Err(Error::data(format!("checkpoint metadata {k} contains tabs or newlines")));
            }
            meta.insert(k.to_string(), v.clone());
        }
        let mut tensors: Vec<(String, Tensor)> = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy()))
            .map(|(k, t)| t.map(|t| (k, t)))
            .collect::<std::result::Result<_, _>>()?;
        for (k, t) in &state.adam.m {
            tensors.push((format!("adam.m.{k}"), t.clone()));
        }
        for (k, t) in &state.adam.v {
            tensors.push((format!("adam.v.{k}"), t.clone()));
        }
        let mut blobs = BTreeMap::new();
        blobs.insert("config".to_string(), config_text.as_bytes().to_vec());
        Ok(Self { meta, tensors, blobs })
    }

    /// Writes parameter values into `model` and rebuilds the trainer state.
    pub fn restore(&self, model: &Model) -> Result<TrainState> {
        let params: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .cloned()
            .collect();
        let missing: Vec<&String> = model
            .params
            .iter()
            .map(|(k, _)| k)
            .filter(|k| !params.iter().any(|(n, _)| n == *k))
            .collect();
        if let Some(name) = missing.first() {
            return Err(Error::data(format!(
                "checkpoint is missing parameter {name} ({} missing in total)",
                missing.len()
            )));
        }
        model.load_values(&params)?;
        let mut adam = Adam::new(self.meta_f64("adam.lr")?);
        adam.step = self.meta_u64("adam.step")?;
        adam.beta1 = self.meta_f64("adam.beta1")?;
        adam.beta2 = self.meta_f64("adam.beta2")?;
        adam.eps = self.meta_f64("adam.eps")?;
        for (n, t) in &self.tensors {
            if let Some(k) = n.strip_prefix("adam.m.") {
                adam.m.insert(k.to_string(), t.to_dtype(model.dtype())?);
            } else if let Some(k) = n.strip_prefix("adam.v.") {
                adam.v.insert(k.to_string(), t.to_dtype(model.dtype())?);
            }
        }
        Ok(TrainState {
            step: self.step()?,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let mut payload = Vec::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        for (name, t) in &self.tensors {
            let dtype = match t.dtype() {
                DType::F64 => "f64",
                DType::F32 => "f32",
                other => return Err(Error::data(format!("tensor {name}: unsupported dtype {other:?}"))),
            };
            let bytes = tensor_le_bytes(t)?;
            let shape: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor\t{name}\t{dtype}\t{}\t{}\t{}\n",
                shape.join(","),
                payload.len(),
                bytes.len()
            ));
            payload.extend_from_slice(&bytes);
        }
        for (name, b) in &self.blobs {
            manifest.push_str(&format!("blob\t{name}\t{}\t{}\n", payload.len(), b.len()));
            payload.extend_from_slice(b);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |m: String| Error::format(path, m);
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(HEADER_LEN..HEADER_LEN + mlen)
            .ok_or_else(|| fmt("truncated manifest".into()))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| fmt("manifest is not UTF-8".into()))?;
        let payload = &bytes[HEADER_LEN + mlen..];
        let slice = |off: &str, n: &str| -> Result<&[u8]> {
            let off: usize = off.parse().map_err(|_| fmt(format!("bad offset {off}")))?;
            let n: usize = n.parse().map_err(|_| fmt(format!("bad length {n}")))?;
            payload
                .get(off..off + n)
                .ok_or_else(|| fmt(format!("truncated payload at offset {off}")))
        };
        let mut ck = Checkpoint {
            meta: BTreeMap::new(),
            tensors: Vec::new(),
            blobs: BTreeMap::new(),
        };
        for line in manifest.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dtype, shape, off, n] => {
                    let dims: Vec<usize> = if shape.is_empty() {
                        Vec::new()
                    } else {
                        shape
                            .split(',')
                            .map(|d| d.parse().map_err(|_| fmt(format!("bad shape for {name}"))))
                            .collect::<Result<_>>()?
                    };
                    let raw = slice(off, n)?;
                    let count: usize = dims.iter().product();
                    let t = match *dtype {
                        "f32" if raw.len() == 4 * count => {
                            let v: Vec<f32> = raw
                                .chunks_exact(4)
                                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                                .collect();
                            Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                        }
                        "f64" if raw.len() == 8 * count => {
                            let v: Vec<f64> = raw
                                .chunks_exact(8)
                                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                                .collect();
                            Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                        }
                        _ => return Err(fmt(format!("tensor {name}: dtype/size mismatch"))),
                    };
                    ck.tensors.push((name.to_string(), t));
                }
                ["blob", name, off, n] => {
                    ck.blobs.insert(name.to_string(), slice(off, n)?.to_vec());
                }
                _ => return Err(fmt(format!("unrecognised manifest line: {line}"))),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::AlignerConfig;
    use crate::dit::DitConfig;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            aligner: AlignerConfig {
                scale: 1,
                in_channels: 4,
                hidden: 8,
                out_channels: 8,
                temporal_ratio: 4,
                temporal_kernel: 5,
            },
            dit: DitConfig {
                depth: 2,
                width: 8,
                heads: 2,
                mlp_ratio: 1,
                head_hidden: 16,
            },
            interval: 1,
        }
    }

    #[test]
    fn roundtrip_restores_parameters() {
        let a = Model::new(cfg(), 1, DType::F32).unwrap();
        let b = Model::new(cfg(), 2, DType::F32).unwrap();
        let mut state = TrainState::new(1e-3);
        state.step = 7;
        let ck = Checkpoint::capture(&a, &state, &[("seed", "5".into())], "[train]\nsteps = 3\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta_u64("seed").unwrap(), 5);
        assert_eq!(back.config_text().unwrap(), "[train]\nsteps = 3\n");
        let st = back.restore(&b).unwrap();
        assert_eq!(st.step, 7);
        assert_eq!(a.params.hash("").unwrap(), b.params.hash("").unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let a = Model::new(cfg(), 1, DType::F32).unwrap();
        let ck = Checkpoint::capture(&a, &TrainState::new(1e-3), &[], "").unwrap();
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x.bin");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("x.bin"));
        assert!(Checkpoint::capture(&a, &TrainState::new(1e-3), &[("k", "a\tb".into())], "").is_err());
    }
}
