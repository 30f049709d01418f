//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `VGFMCKPT` |
//! | 8 | 4 | `u32` format version (currently 1) |
//! | 12 | 8 | `u64` header length `H` in bytes |
//! | 20 | `H` | UTF-8 JSON header |
//! | 20 + `H` | `8 * sum(len)` | `f64` blocks in header order |
//!
//! The header lists the blocks as `{"name", "len"}` pairs. Parameters are
//! flattened layer by layer, weight (row-major, `in x out`) then bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{AdamState, Architecture, NetworkParams};
use crate::trainer::{Model, Progress, TrainConfig, TrainReport, TrainState};

pub const MAGIC: &[u8; 8] = b"VGFMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamInfo {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamInfo {
    fn of(s: &AdamState) -> Self {
        AdamInfo {
            step: s.step,
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    v_arch: Architecture,
    g_arch: Architecture,
    progress: Progress,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    adam: Option<[AdamInfo; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    report: Option<TrainReport>,
    blocks: Vec<BlockInfo>,
}

/// Optimizer moments for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub v: AdamState,
    pub g: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: Option<TrainConfig>,
    pub progress: Progress,
    pub optimizer: Option<OptimizerState>,
    pub report: Option<TrainReport>,
}

impl Checkpoint {
    /// Parameters only.
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            model: model.clone(),
            config: None,
            progress: Progress::default(),
            optimizer: None,
            report: None,
        }
    }

    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        Checkpoint {
            model: state.model.clone(),
            config: Some(cfg.clone()),
            progress: state.progress,
            optimizer: Some(OptimizerState {
                v: state.opt_v.clone(),
                g: state.opt_g.clone(),
            }),
            report: Some(state.report.clone()),
        }
    }

    pub fn to_state(&self) -> Result<TrainState> {
        let opt = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(TrainState {
            model: self.model.clone(),
            opt_v: opt.v.clone(),
            opt_g: opt.g.clone(),
            progress: self.progress,
            report: self.report.clone().unwrap_or_default(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<(&str, Vec<f64>)> = vec![("v", self.model.v.flatten()), ("g", self.model.g.flatten())];
        if let Some(o) = &self.optimizer {
            blocks.push(("v.adam_m", o.v.m.clone()));
            blocks.push(("v.adam_v", o.v.v.clone()));
            blocks.push(("g.adam_m", o.g.m.clone()));
            blocks.push(("g.adam_v", o.g.v.clone()));
        }
        let header = Header {
            v_arch: self.model.v.architecture(),
            g_arch: self.model.g.architecture(),
            progress: self.progress,
            config: self.config.clone(),
            adam: self.optimizer.as_ref().map(|o| [AdamInfo::of(&o.v), AdamInfo::of(&o.g)]),
            report: self.report.clone(),
            blocks: blocks
                .iter()
                .map(|(n, b)| BlockInfo {
                    name: n.to_string(),
                    len: b.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = blocks.iter().map(|b| b.1.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &blocks {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let total: usize = header.blocks.iter().map(|b| b.len).sum();
        if bytes.len() != body + 8 * total {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                8 * total,
                bytes.len() - body
            )));
        }
        let mut pos = body;
        let mut read = |name: &str| -> Result<Vec<f64>> {
            let info = header
                .blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))?;
            // blocks are read in header order
            let v = bytes[pos..pos + 8 * info.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * info.len;
            Ok(v)
        };
        let order: Vec<String> = header.blocks.iter().map(|b| b.name.clone()).collect();
        let mut data = std::collections::HashMap::new();
        for name in &order {
            data.insert(name.clone(), read(name)?);
        }
        let take = |name: &str| -> Result<Vec<f64>> {
            data.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing block '{name}'")))
        };
        let v = NetworkParams::unflatten(header.v_arch, &take("v")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let g = NetworkParams::unflatten(header.g_arch, &take("g")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = match &header.adam {
            None => None,
            Some([av, ag]) => {
                let mk = |info: &AdamInfo, m: Vec<f64>, s: Vec<f64>| AdamState {
                    m,
                    v: s,
                    step: info.step,
                    lr: info.lr,
                    beta1: info.beta1,
                    beta2: info.beta2,
                    eps: info.eps,
                };
                Some(OptimizerState {
                    v: mk(av, take("v.adam_m")?, take("v.adam_v")?),
                    g: mk(ag, take("g.adam_m")?, take("g.adam_v")?),
                })
            }
        };
        Ok(Checkpoint {
            model: Model { v, g },
            config: header.config,
            progress: header.progress,
            optimizer,
            report: header.report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes a parameters-only checkpoint.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Checkpoint::load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{EpochRecord, WarmupRecord};

    fn state() -> TrainState {
        let model = Model::init(2, 4, 3, 9).unwrap();
        let mut opt_v = AdamState::for_params(&model.v, 1e-3);
        opt_v.step = 7;
        opt_v.m[3] = 0.25;
        TrainState {
            opt_g: AdamState::for_params(&model.g, 1e-4),
            opt_v,
            model,
            progress: Progress {
                warmup_done: 5,
                epochs_done: 1,
            },
            report: TrainReport {
                warmup: vec![WarmupRecord {
                    iter: 0,
                    loss: 1.5,
                    velocity: 1.0,
                    growth: 0.5,
                }],
                epochs: vec![EpochRecord {
                    epoch: 1,
                    loss_vgfm: 0.3,
                    loss_ot: 0.1,
                    seconds: 2.0,
                }],
            },
        }
    }

    #[test]
    fn round_trip_full() {
        let s = state();
        let ck = Checkpoint::from_state(&s, &TrainConfig::gene());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model, s.model);
        assert_eq!(back.optimizer.as_ref().unwrap().v, s.opt_v);
        assert_eq!(back.progress, s.progress);
        assert_eq!(back.config, Some(TrainConfig::gene()));
        // wall time is not persisted
        assert_eq!(back.report.unwrap().epochs[0].seconds, 0.0);
    }

    #[test]
    fn layout_prefix() {
        let m = Model::init(1, 2, 2, 0).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"VGFMCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let n = m.v.param_count() + m.g.param_count();
        assert_eq!(bytes.len(), 20 + h + 8 * n);
        let first = f64::from_le_bytes(bytes[20 + h..28 + h].try_into().unwrap());
        assert_eq!(first, m.v.layers[0].weight[[0, 0]]);
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::init(1, 2, 2, 0).unwrap();
        let mut bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = Model::init(3, 4, 3, 2).unwrap();
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }
}
