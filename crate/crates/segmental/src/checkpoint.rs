//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `SEGC`, `u16` version, `u32` header length, the
//! JSON header, `u32` tensor count, then per tensor a `u16` name length, the
//! name, `u32` rows, `u32` cols and `rows * cols` `f64` values. Model
//! parameters come first in their canonical order, followed by optimizer
//! accumulators named `opt.m2.<i>`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use segmental_core::math::Mat;
use segmental_core::model::{DecodeKind, Model, ModelConfig, Objective};
use segmental_core::params::ParamSet;
use segmental_core::training::{OptimizerConfig, OptimizerState, Stage};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"SEGC";
pub const VERSION: u16 = 1;

/// Where training stopped. Data order and dropout masks are pure functions
/// of `seed` and the epoch, so this is the complete random state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub objective: Objective,
    pub decode: DecodeKind,
    pub seed: u64,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_dev_per: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    step_size: f64,
    steps: u64,
    skipped: u64,
    accumulators: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainState>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.bytes.len(), "checkpoint truncated at byte {}", self.pos);
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Mat)> {
        let n = self.u16()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())?;
        let rows = self.u32()?;
        let cols = self.u32()?;
        let data = self
            .take(8 * rows * cols)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            train: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step_size: o.step_size,
                steps: o.steps,
                skipped: o.skipped,
                accumulators: o.second_moments.len(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.model.params.tensors();
        let extra = self.optimizer.as_ref().map_or(0, |o| o.second_moments.len());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&((tensors.len() + extra) as u32).to_le_bytes());
        for (name, m) in &tensors {
            put_tensor(&mut out, name, m.rows(), m.cols(), m.as_slice());
        }
        if let Some(o) = &self.optimizer {
            for (i, acc) in o.second_moments.iter().enumerate() {
                put_tensor(&mut out, &format!("opt.m2.{i}"), acc.len(), 1, acc);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, "not a checkpoint");
        let version = r.u16()?;
        ensure!(version == VERSION, "unsupported checkpoint version {version}");
        let len = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(len)?).context("checkpoint header")?;
        let count = r.u32()?;
        let mut model = Model::init(header.model.clone(), 0)?;
        let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
        let expected_extra = header.optimizer.as_ref().map_or(0, |o| o.accumulators);
        ensure!(
            count == names.len() + expected_extra,
            "checkpoint has {count} tensors, configuration implies {}",
            names.len() + expected_extra
        );
        for (expected, slot) in names.iter().zip(model.params.tensors_mut()) {
            let (name, m) = r.tensor()?;
            ensure!(&name == expected, "expected tensor {expected}, found {name}");
            ensure!(
                m.shape() == slot.shape(),
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            );
            *slot = m;
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut second_moments = Vec::with_capacity(h.accumulators);
                for i in 0..h.accumulators {
                    let (name, m) = r.tensor()?;
                    ensure!(name == format!("opt.m2.{i}"), "unexpected tensor {name}");
                    second_moments.push(m.into_vec());
                }
                Some(OptimizerState {
                    config: h.config,
                    step_size: h.step_size,
                    second_moments,
                    steps: h.steps,
                    skipped: h.skipped,
                })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            bail!("{} trailing bytes after checkpoint", bytes.len() - r.pos);
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).with_context(|| path.display().to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| path.display().to_string())?;
        Self::from_bytes(&bytes).with_context(|| path.display().to_string())
    }
}
