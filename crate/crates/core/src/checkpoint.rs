//! "SEGC" checkpoints: magic, u32 version, u64 header length, a JSON header
//! with the tensor directory, then contiguous little-endian f32 blobs.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, WeightTable};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adamw.m/";
const MOMENT_V: &str = "adamw.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    pub best_metrics: Option<EvalReport>,
    pub weight_table: Option<WeightTable>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    epoch: usize,
    best_metrics: Option<EvalReport>,
    weight_table: Option<WeightTable>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: 0,
            best_metrics: None,
            weight_table: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<f32>)> =
            self.model.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (n, (m, _)) in &opt.moments {
                named.push((format!("{MOMENT_M}{n}"), m));
            }
            for (n, (_, v)) in &opt.moments {
                named.push((format!("{MOMENT_V}{n}"), v));
            }
        }
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dims: t.dims().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            model_config: self.model.config.clone(),
            epoch: self.epoch,
            best_metrics: self.best_metrics.clone(),
            weight_table: self.weight_table.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(format_err("checkpoint shorter than its fixed header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format_err("bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&h| h <= body.len())
            .ok_or_else(|| format_err("header length runs past end of file"))?;
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| format_err(format!("unreadable checkpoint header: {e}")))?;
        let blob = &body[hlen..];

        let mut expected_end = 0u64;
        let mut params = IndexMap::new();
        let mut m_moments = IndexMap::new();
        let mut v_moments = IndexMap::new();
        for e in &header.tensors {
            if e.offset != expected_end {
                return Err(format_err(format!("{}: offset {} is not contiguous", e.name, e.offset)));
            }
            let numel = e.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n > 0)
                .ok_or_else(|| format_err(format!("{}: bad dims", e.name)))?;
            let start = e.offset as usize;
            let end = start
                .checked_add(numel * 4)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| format_err(format!("{}: data truncated", e.name)))?;
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.dims.clone(), data).map_err(|err| format_err(err.to_string()))?;
            expected_end = end as u64;
            if let Some(n) = e.name.strip_prefix(MOMENT_M) {
                m_moments.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(MOMENT_V) {
                v_moments.insert(n.to_string(), t);
            } else if params.insert(e.name.clone(), t).is_some() {
                return Err(format_err(format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_end as usize != blob.len() {
            return Err(format_err("trailing bytes after the last tensor"));
        }
        header.model_config.validate()?;
        let params = ModelParams::from_named(&header.model_config, params)?;
        let model = Model::new(header.model_config, params)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(oh) => {
                let mut moments = IndexMap::new();
                for (name, p) in model.params.iter() {
                    let m = m_moments.shift_remove(name);
                    let v = v_moments.shift_remove(name);
                    match (m, v) {
                        (Some(m), Some(v)) if m.dims() == p.dims() && v.dims() == p.dims() => {
                            moments.insert(name.to_string(), (m, v));
                        }
                        _ => return Err(format_err(format!("missing or misshapen moments for {name}"))),
                    }
                }
                Some(AdamW {
                    config: oh.config,
                    step: oh.step,
                    moments,
                })
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
            best_metrics: header.best_metrics,
            weight_table: header.weight_table,
        })
    }

    /// Fails with `ConfigMismatch` unless this checkpoint was built for `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from expected {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
