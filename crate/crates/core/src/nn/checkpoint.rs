//! Flat binary parameter container shared by every network in the crate.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! magic      8 bytes  "DRRLCKPT"
//! version    u32      currently 1
//! kind       u32 len, UTF-8 bytes
//! n_attrs    u32
//!   key      u32 len, UTF-8      value  u32 len, UTF-8
//! n_tensors  u32
//!   name     u32 len, UTF-8
//!   ndims    u32, then ndims × u32 dims
//!   data     prod(dims) × f32 little-endian, row-major
//! ```
//!
//! Values are stored as f32; loading widens back to f64.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Activation, Linear, Lstm, LstmLayer, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub attrs: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Self::default() }
    }

    pub fn set_attr(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.attrs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.attrs.push((key.to_string(), value)),
        }
    }

    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| err(format!("missing attribute `{key}`")))
    }

    pub fn attr_parse<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        self.attr(key)?.parse().map_err(|_| err(format!("attribute `{key}` does not parse")))
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor `{name}` dims/data mismatch");
        self.tensors.push(Tensor {
            name: name.to_string(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: data.iter().map(|&v| v as f32).collect(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| err(format!("missing tensor `{name}`")))
    }

    /// Reads a tensor and checks its shape.
    pub fn read(&self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.tensor(name)?;
        if t.dims.len() != dims.len() || t.dims.iter().zip(dims).any(|(&a, &b)| a as usize != b) {
            return Err(err(format!("tensor `{name}` has dims {:?}, expected {:?}", t.dims, dims)));
        }
        Ok(t.to_f64())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(err(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }

    pub fn put_mlp(&mut self, prefix: &str, mlp: &Mlp) {
        let dims: Vec<String> = mlp.dims().iter().map(|d| d.to_string()).collect();
        let acts: Vec<String> = mlp.activations.iter().map(|a| a.code().to_string()).collect();
        self.set_attr(&format!("{prefix}.dims"), dims.join(","));
        self.set_attr(&format!("{prefix}.activations"), acts.join(","));
        for (i, l) in mlp.layers.iter().enumerate() {
            self.push(&format!("{prefix}.{i}.weight"), &[l.out_dim, l.in_dim], &l.weight);
            self.push(&format!("{prefix}.{i}.bias"), &[l.out_dim], &l.bias);
        }
    }

    pub fn get_mlp(&self, prefix: &str) -> Result<Mlp> {
        let dims = parse_list(self.attr(&format!("{prefix}.dims"))?)?;
        let codes = parse_list(self.attr(&format!("{prefix}.activations"))?)?;
        if dims.len() < 2 || codes.len() != dims.len() - 1 {
            return Err(err(format!("`{prefix}` has inconsistent layer metadata")));
        }
        let mut layers = Vec::new();
        let mut acts = Vec::new();
        for i in 0..codes.len() {
            let (inp, out) = (dims[i], dims[i + 1]);
            layers.push(Linear {
                in_dim: inp,
                out_dim: out,
                weight: self.read(&format!("{prefix}.{i}.weight"), &[out, inp])?,
                bias: self.read(&format!("{prefix}.{i}.bias"), &[out])?,
            });
            acts.push(Activation::from_code(codes[i] as u8).ok_or_else(|| err("unknown activation code"))?);
        }
        Ok(Mlp { layers, activations: acts })
    }

    pub fn put_lstm(&mut self, prefix: &str, lstm: &Lstm) {
        self.set_attr(&format!("{prefix}.input_dim"), lstm.input_dim());
        self.set_attr(&format!("{prefix}.hidden_dim"), lstm.hidden_dim());
        self.set_attr(&format!("{prefix}.num_layers"), lstm.num_layers());
        for (i, l) in lstm.layers.iter().enumerate() {
            let h4 = 4 * l.hidden_dim;
            self.push(&format!("{prefix}.{i}.w_ih"), &[h4, l.input_dim], &l.w_ih);
            self.push(&format!("{prefix}.{i}.w_hh"), &[h4, l.hidden_dim], &l.w_hh);
            self.push(&format!("{prefix}.{i}.bias"), &[h4], &l.bias);
        }
    }

    pub fn get_lstm(&self, prefix: &str) -> Result<Lstm> {
        let input_dim: usize = self.attr_parse(&format!("{prefix}.input_dim"))?;
        let hidden_dim: usize = self.attr_parse(&format!("{prefix}.hidden_dim"))?;
        let num_layers: usize = self.attr_parse(&format!("{prefix}.num_layers"))?;
        let mut layers = Vec::new();
        for i in 0..num_layers {
            let inp = if i == 0 { input_dim } else { hidden_dim };
            let h4 = 4 * hidden_dim;
            layers.push(LstmLayer {
                input_dim: inp,
                hidden_dim,
                w_ih: self.read(&format!("{prefix}.{i}.w_ih"), &[h4, inp])?,
                w_hh: self.read(&format!("{prefix}.{i}.w_hh"), &[h4, hidden_dim])?,
                bias: self.read(&format!("{prefix}.{i}.bias"), &[h4])?,
            });
        }
        Ok(Lstm { layers })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.attrs.len() as u32).to_le_bytes());
        for (k, v) in &self.attrs {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let n_attrs = r.u32()? as usize;
        let mut attrs = Vec::new();
        for _ in 0..n_attrs {
            let k = r.string()?;
            let v = r.string()?;
            attrs.push((k, v));
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or_else(|| err("tensor too large"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Self { kind, attrs, tensors })
    }
}

/// Rounds every value through f32, matching what a save/load cycle produces.
pub fn round_to_f32<P: super::Parameters>(p: &mut P) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse().map_err(|_| err(format!("bad list `{s}`")))).collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        core::str::from_utf8(b).map(|s| s.to_string()).map_err(|_| err("invalid UTF-8"))
    }
}
