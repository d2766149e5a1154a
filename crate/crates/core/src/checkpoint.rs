//! Self-describing binary checkpoints: an 8-byte magic, a little-endian
//! u64 header length, a JSON header, then little-endian f32 tensor data.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lut::Lut3D;
use crate::model::{DehazeModel, ModelConfig};
use crate::purifier::PurifierNet;
use crate::tensor::{Shape, Tensor};
use crate::training::{AdamW, OptState, PlateauScheduler, LUT_GRID_NAME};

pub const MAGIC: &[u8; 8] = b"DHZFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub best_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub adamw: AdamW,
    pub state: OptState<f32>,
    pub scheduler: Option<PlateauScheduler>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DehazeModel<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Shape,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct SchedulerHeader {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    adamw: AdamW,
    step: u64,
    moments: usize,
    scheduler: Option<SchedulerHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    lut_size: usize,
    lut_c_max: f32,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: DehazeModel<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            meta: TrainingMeta::default(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        self.model.net.weights.for_each(|name, t| out.push((format!("purifier.{name}"), t)));
        out.push((LUT_GRID_NAME.to_string(), &self.model.lut.grid));
        if let Some(opt) = &self.optimizer {
            for (i, (m, v)) in opt.state.m.iter().zip(&opt.state.v).enumerate() {
                out.push((format!("adamw.m.{i}"), m));
                out.push((format!("adamw.v.{i}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let mut offset = 0;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            adamw: o.adamw,
            step: o.state.step,
            moments: o.state.m.len(),
            scheduler: o.scheduler.as_ref().map(|s| SchedulerHeader {
                lr: s.lr,
                factor: s.factor,
                patience: s.patience,
                best: s.best.is_finite().then_some(s.best),
                bad_epochs: s.bad_epochs,
            }),
        });
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.config,
            lut_size: self.model.lut.size(),
            lut_c_max: self.model.lut.c_max(),
            tensors,
            optimizer,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(Error::Checkpoint(format!("header length {hlen} exceeds file size")));
        }
        let (json, payload) = body.split_at(hlen as usize);
        let probe: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let version = probe
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("header has no version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(probe).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if payload.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f32 values".into()));
        }
        let values = payload.len() / 4;
        let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
        for e in header.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset.checked_add(len).is_none_or(|end| end > values) {
                return Err(Error::Checkpoint(format!("tensor {} lies outside the payload", e.name)));
            }
            let data = payload[e.offset * 4..(e.offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            tensors.insert(e.name, Tensor::from_vec(e.shape, data)?);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };

        header.model.validate()?;
        let grid = take(LUT_GRID_NAME)?;
        let lut = Lut3D::from_grid(grid, header.lut_c_max)?;
        if lut.size() != header.lut_size {
            return Err(Error::Checkpoint(format!(
                "LUT size {} does not match header {}",
                lut.size(),
                header.lut_size
            )));
        }
        let net = PurifierNet::from_named(header.model.width, |name| tensors.remove(&format!("purifier.{name}")))?;
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut take = |name: String| {
                    tensors
                        .remove(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
                };
                let mut state = OptState {
                    step: o.step,
                    m: Vec::with_capacity(o.moments),
                    v: Vec::with_capacity(o.moments),
                };
                for i in 0..o.moments {
                    state.m.push(take(format!("adamw.m.{i}"))?);
                    state.v.push(take(format!("adamw.v.{i}"))?);
                }
                let scheduler = o.scheduler.map(|s| PlateauScheduler {
                    lr: s.lr,
                    factor: s.factor,
                    patience: s.patience,
                    best: s.best.unwrap_or(f64::INFINITY),
                    bad_epochs: s.bad_epochs,
                });
                Some(OptimizerSnapshot {
                    adamw: o.adamw,
                    state,
                    scheduler,
                })
            }
        };
        let model = DehazeModel {
            net,
            lut,
            config: header.model,
        };
        Ok(Self {
            model,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
