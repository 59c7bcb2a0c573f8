//! Binary checkpoint: `b"SPKV"`, `u32` version, `u32` length + UTF-8 JSON
//! metadata, then little-endian `f32` parameters in [`Model::params`] order,
//! then (optionally) Adam first and second moments in the same order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"SPKV";
pub const VERSION: u32 = 1;

/// Adam moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros(model: &Model) -> Self {
        let m: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub gate: GateConfig,
    pub step: u64,
    pub rng: Rng,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    gate: GateConfig,
    step: u64,
    rng: Rng,
    params: Vec<ParamEntry>,
    has_optimizer: bool,
    #[serde(default)]
    optimizer_step: u64,
}

fn write_f32s(out: &mut Vec<u8>, data: &[f32]) {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn new(model: Model, gate: GateConfig) -> Self {
        Self { model, gate, step: 0, rng: Rng::new(0), optimizer: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.param_names();
        let params = self.model.params();
        let meta = Metadata {
            config: self.model.config.clone(),
            gate: self.gate.clone(),
            step: self.step,
            rng: self.rng.clone(),
            params: names
                .into_iter()
                .zip(&params)
                .map(|(name, p)| ParamEntry { name, shape: p.shape().to_vec() })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &params {
            write_f32s(&mut out, p.data());
        }
        if let Some(opt) = &self.optimizer {
            for buf in opt.m.iter().chain(&opt.v) {
                write_f32s(&mut out, buf);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(len)?)?;
        let mut params = Vec::with_capacity(meta.params.len());
        for e in &meta.params {
            let n = e.shape.iter().product();
            params.push(Tensor::new(&e.shape, r.f32s(n)?)?);
        }
        let optimizer = if meta.has_optimizer {
            let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
            let m = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { step: meta.optimizer_step, m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Model::from_params(meta.config, params)?;
        Ok(Self { model, gate: meta.gate, step: meta.step, rng: meta.rng, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
