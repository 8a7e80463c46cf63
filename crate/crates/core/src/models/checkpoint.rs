//! Binary checkpoint format.
//!
//! ```text
//! "DCSG"  magic
//! u32     format version
//! u32     tensor count
//! per tensor:
//!   u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f32 data (little-endian)
//! ```
//!
//! Batch-norm running statistics are stored under names ending in
//! `.running_mean` / `.running_var`, optimizer state under `adam.`; neither is
//! a learned parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::network::Network;
use crate::models::spec::NetworkSpec;
use crate::nn::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCSG";
pub const FORMAT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const ADAM_PREFIX: &str = "adam.";
const ADAM_STEP: &str = "adam.step";

/// True for tensors that are trained by gradient descent.
pub fn is_learned(name: &str) -> bool {
    !(name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR) || name.starts_with(ADAM_PREFIX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic, not a DCSG checkpoint".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Snapshot of a network, optionally with its optimizer state.
    pub fn from_network(net: &Network, adam: Option<&AdamState>) -> Self {
        let mut tensors = Vec::new();
        for p in net.params() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for n in net.norms() {
            let c = n.state.channels();
            tensors.push((
                format!("{}{RUNNING_MEAN}", n.name),
                Tensor::new(vec![c], n.state.running_mean.clone()).expect("shape matches"),
            ));
            tensors.push((
                format!("{}{RUNNING_VAR}", n.name),
                Tensor::new(vec![c], n.state.running_var.clone()).expect("shape matches"),
            ));
        }
        if let Some(adam) = adam {
            for ((p, m), v) in net.params().iter().zip(&adam.m).zip(&adam.v) {
                let shape = p.value.shape().to_vec();
                tensors.push((
                    format!("{ADAM_PREFIX}m.{}", p.name),
                    Tensor::new(shape.clone(), m.clone()).expect("shape matches"),
                ));
                tensors.push((
                    format!("{ADAM_PREFIX}v.{}", p.name),
                    Tensor::new(shape, v.clone()).expect("shape matches"),
                ));
            }
            tensors.push((ADAM_STEP.to_string(), Tensor::scalar(adam.t as f32)));
        }
        Checkpoint { tensors }
    }

    fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "checkpoint `{name}` has shape {:?}, network expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Rebuilds a network of the given architecture from stored weights and
    /// running statistics.
    pub fn to_network(&self, spec: NetworkSpec) -> Result<Network> {
        let mut net = Network::build(spec, 0)?;
        for p in net.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = self.require(&p.name, &shape)?.clone();
        }
        for n in net.norms_mut() {
            let c = n.state.channels();
            n.state.running_mean = self
                .require(&format!("{}{RUNNING_MEAN}", n.name), &[c])?
                .data()
                .to_vec();
            n.state.running_var = self
                .require(&format!("{}{RUNNING_VAR}", n.name), &[c])?
                .data()
                .to_vec();
            n.state.initialized = true;
        }
        Ok(net)
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn adam_state(&self, net: &Network, config: AdamConfig) -> Result<Option<AdamState>> {
        let Some(step) = self.get(ADAM_STEP) else {
            return Ok(None);
        };
        let mut state = AdamState::new(config, net.params());
        for ((p, m), v) in net.params().iter().zip(&mut state.m).zip(&mut state.v) {
            let shape = p.value.shape();
            *m = self.require(&format!("{ADAM_PREFIX}m.{}", p.name), shape)?.data().to_vec();
            *v = self.require(&format!("{ADAM_PREFIX}v.{}", p.name), shape)?.data().to_vec();
        }
        state.t = step.item()? as u64;
        Ok(Some(state))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated checkpoint at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Sidecar stored next to a checkpoint (`<file>.json`) describing how to
/// rebuild the network and prepare its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkSpec,
    pub iteration: u64,
    pub seed: u64,
    #[serde(default)]
    pub breath_hold_sizes: Option<Vec<usize>>,
}

impl CheckpointMeta {
    pub fn path_for(checkpoint: &Path) -> std::path::PathBuf {
        crate::data::io::sidecar_path(checkpoint)
    }

    pub fn write(&self, checkpoint: &Path) -> Result<()> {
        let p = Self::path_for(checkpoint);
        let s = serde_json::to_string_pretty(self).expect("meta serializes");
        std::fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn read(checkpoint: &Path) -> Result<Self> {
        let p = Self::path_for(checkpoint);
        let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(&p, e.to_string()))
    }
}
