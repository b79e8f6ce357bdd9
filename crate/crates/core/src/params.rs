//! Learnable parameters, their gradient buffers, and checkpoints.
//!
//! Initialization is deterministic per parameter: each tensor draws from a
//! ChaCha8 stream seeded with `store_seed ^ fnv1a(name)`, so the values of a
//! parameter depend only on the store seed and the parameter's name, not on
//! construction order.
//!
//! Checkpoint format (`MTIC`, version 1): magic, `u32` version, then until end
//! of file a sequence of records `u32 name_len`, UTF-8 name, `MTIT` tensor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&name));
                let data = (0..shape.numel())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::from_vec(shape, data)?
            }
        };
        Ok(self.insert(name, value))
    }

    /// Registers a parameter with an explicit value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter {
            grad: Tensor::zeros(value.shape()),
            name,
            value,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for p in &self.params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            p.value.write_bytes(&mut out);
        }
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Overwrites every parameter from checkpoint bytes. The checkpoint must
    /// contain exactly this store's names, each with a matching shape.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = read_checkpoint(bytes)?;
        if records.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for (name, value) in records {
            let id = self.id(&name).ok_or_else(|| {
                Error::contract(format!("checkpoint parameter {name:?} is not part of the model"))
            })?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::contract(format!(
                    "parameter {name:?}: checkpoint shape {} vs model shape {}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.load_checkpoint_bytes(&fs::read(path)?)
    }
}

/// Parses checkpoint bytes into `(name, tensor)` records in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let mut out = Vec::new();
    while !r.is_empty() {
        let len = r.u32()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::data_at(at, "parameter name is not UTF-8"))?
            .to_string();
        let t = Tensor::read_bytes(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}
