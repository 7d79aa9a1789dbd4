//! Named weight tensors and the `TOME` container format.
//!
//! Layout, all little-endian: the magic `TOME`, a `u8` version (1), a `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per dimension and the `f32` values. Tensors are written
//! in name order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::ModelConfig;

pub const MAGIC: &[u8; 4] = b"TOME";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Name and shape of every tensor a model with this config needs.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (c, hidden) = (cfg.width, cfg.hidden());
    let mut m = BTreeMap::new();
    m.insert("cls_token".to_string(), vec![1, c]);
    m.insert("pos_embed".to_string(), vec![cfg.num_tokens(), c]);
    m.insert("patch_embed.weight".to_string(), vec![cfg.patch_dim(), c]);
    m.insert("patch_embed.bias".to_string(), vec![c]);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        m.insert(format!("{p}.norm1.weight"), vec![c]);
        m.insert(format!("{p}.norm1.bias"), vec![c]);
        m.insert(format!("{p}.attn.qkv.weight"), vec![c, 3 * c]);
        m.insert(format!("{p}.attn.qkv.bias"), vec![3 * c]);
        m.insert(format!("{p}.attn.proj.weight"), vec![c, c]);
        m.insert(format!("{p}.attn.proj.bias"), vec![c]);
        m.insert(format!("{p}.norm2.weight"), vec![c]);
        m.insert(format!("{p}.norm2.bias"), vec![c]);
        m.insert(format!("{p}.mlp.fc1.weight"), vec![c, hidden]);
        m.insert(format!("{p}.mlp.fc1.bias"), vec![hidden]);
        m.insert(format!("{p}.mlp.fc2.weight"), vec![hidden, c]);
        m.insert(format!("{p}.mlp.fc2.bias"), vec![c]);
    }
    m.insert("norm.weight".to_string(), vec![c]);
    m.insert("norm.bias".to_string(), vec![c]);
    m.insert("head.weight".to_string(), vec![c, cfg.num_classes]);
    m.insert("head.bias".to_string(), vec![cfg.num_classes]);
    m
}

fn is_norm(name: &str) -> bool {
    name.starts_with("norm.") || name.contains(".norm1.") || name.contains(".norm2.")
}

/// Seeded Glorot-uniform init: every tensor is drawn from `U(-a, a)` with
/// `a = √(6 / (fan_in + fan_out))`, taking a 1-D tensor of length `n` as
/// `n → n`. Layer-norm gains start at 1 and layer-norm shifts at 0.
///
/// Values are drawn as `f32`, so the weights survive a round trip through
/// the file format exactly for any scalar type.
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if is_norm(&name) {
            let v = if name.ends_with(".weight") { T::one() } else { T::zero() };
            vec![v; n]
        } else {
            let (fan_in, fan_out) = match shape.as_slice() {
                [rows, cols] => (*rows, *cols),
                _ => (n, n),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            (0..n).map(|_| T::of_f32(rng.gen_range(-a..a))).collect()
        };
        tensors.insert(name, Tensor { shape, data });
    }
    ModelWeights { tensors }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    /// Raw values of a tensor.
    pub fn data(&self, name: &str) -> Result<&[T]> {
        Ok(&self.get(name)?.data)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Every expected tensor present exactly once with the right shape.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, config needs {shape:?}",
                    t.shape
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Encodes to the container format. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            tensor: "<header>".to_string(),
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error_at(0, "bad magic, expected `TOME`"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            r.tensor = format!("<tensor #{i}>");
            let len = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error_at(at, "name is not UTF-8"))?
                .to_string();
            r.tensor = name.clone();
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if tensors.insert(name, Tensor { shape, data }).is_some() {
                return Err(r.error_at(at, "duplicate tensor name"));
            }
        }
        if r.pos != bytes.len() {
            r.tensor = "<trailer>".to_string();
            return Err(r.error_at(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    tensor: String,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, reason: &str) -> Error {
        Error::Parse {
            tensor: self.tensor.clone(),
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos,
                &format!("truncated reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
