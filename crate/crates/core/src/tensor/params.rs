use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPWT";

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Uniform in ±√(6 / (fan_in + fan_out)), with fan_in = rows, fan_out = cols.
    Glorot,
    /// Glorot scaled by a gain.
    ScaledGlorot(f64),
    Constant(f64),
}

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Named trainable tensors, iterated in lexicographic path order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(path) {
            return Err(Error::Parameter(format!("duplicate parameter path {path}")));
        }
        if !value.is_finite() {
            return Err(Error::Parameter(format!("parameter {path} has non-finite values")));
        }
        self.entries.insert(path.to_string(), Entry { value, grad: None });
        Ok(())
    }

    /// Registers a `rows×cols` parameter filled per `init`.
    pub fn init(&mut self, path: &str, rows: usize, cols: usize, init: WeightInit, rng: &mut impl Rng) -> Result<()> {
        let value = match init {
            WeightInit::Glorot | WeightInit::ScaledGlorot(_) => {
                let gain = if let WeightInit::ScaledGlorot(g) = init { g } else { 1.0 };
                let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::from_vec(rows, cols, data)
            }
            WeightInit::Constant(v) => Tensor::full(rows, cols, v),
        };
        self.insert(path, value)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.value)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::State(format!("unknown parameter {path}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {path}: expected {:?}, got {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn grad(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).and_then(|e| e.grad.as_ref())
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            let [r, c] = e.value.shape();
            e.grad = Some(Tensor::zeros(r, c));
        }
    }

    /// Adds `grads` into the gradient buffers. Unknown paths are ignored so a
    /// tape may carry parameters of another store.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (path, g) in grads {
            let Some(e) = self.entries.get_mut(path) else { continue };
            if g.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {path}: expected {:?}, got {:?}",
                    e.value.shape(),
                    g.shape()
                )));
            }
            match &mut e.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor, &mut Option<Tensor>)> {
        self.entries.iter_mut().map(|(k, e)| (k, &mut e.value, &mut e.grad))
    }

    /// Writes the `SPWT` format: values are narrowed to `f32`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (path, e) in &self.entries {
            let bytes = path.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Format(format!("parameter path too long: {path}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[2u8])?;
            w.write_all(&(e.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(e.value.cols() as u32).to_le_bytes())?;
            let mut payload = Vec::with_capacity(e.value.len() * 4);
            for &v in e.value.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads the `SPWT` format. Rank-0 and rank-1 entries load as `1×n`.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an SPWT parameter file".into()));
        }
        let count = read_u32(r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut path = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut path)?;
            let path = String::from_utf8(path).map_err(|_| Error::Format("parameter path is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank)?;
            let dims = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [] => (1, 1),
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => return Err(Error::Format(format!("parameter {path} has unsupported rank {}", rank[0]))),
            };
            let mut payload = vec![0u8; rows * cols * 4];
            read_exact(r, &mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store
                .insert(&path, Tensor::from_vec(rows, cols, data))
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated parameter file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
