//! Binary checkpoints and raw tensor dumps.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "SEGC" u32 version=1
//! spec:   u8 kind (0 efcn8, 1 esegnet), u32 in_channels, u32 num_classes,
//!         u32 base_width, u32 H, u32 W, f64 dropout_rate
//! u64 seed, u64 step_count
//! u32 tensor count, then per tensor:
//!         u16 name length, UTF-8 name, u8 dtype (0 f32, 1 f64), u8 rank,
//!         u32 dims[rank], raw data
//! ```
//!
//! Tensor names: model tensors as named by [`ModelParams`], Adam moments as
//! `adam.m.<name>` / `adam.v.<name>`, and f64 training bookkeeping as
//! `train.<key>`.
//!
//! A tensor dump is `"SEGT" u32 version=1` followed by one tensor record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelParams, ModelSpec};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGC";
pub const DUMP_MAGIC: &[u8; 4] = b"SEGT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_CONFIG: &str = "adam.config";
const TRAIN: &str = "train.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub step_count: u64,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    /// Training bookkeeping, stored as f64 tensors under `train.<key>`.
    pub train_state: BTreeMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ModelParams, seed: u64) -> Self {
        Checkpoint {
            spec,
            seed,
            step_count: 0,
            params,
            optimizer: None,
            train_state: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(FORMAT_VERSION);
        let s = &self.spec;
        w.u8(match s.kind {
            ModelKind::Efcn8 => 0,
            ModelKind::Esegnet => 1,
        });
        for v in [s.in_channels, s.num_classes, s.base_width, s.input_size.0, s.input_size.1] {
            w.u32(v as u32);
        }
        w.f64(s.dropout_rate);
        w.u64(self.seed);
        w.u64(self.step_count);

        let mut count = self.params.named().count() + self.train_state.len();
        if let Some(opt) = &self.optimizer {
            count += opt.m.len() + opt.v.len() + 1;
        }
        w.u32(count as u32);
        for (name, t) in self.params.named() {
            w.tensor(name, t);
        }
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            w.tensor(
                ADAM_CONFIG,
                &Tensor::<f64>::new(&[5], vec![c.lr, c.beta1, c.beta2, c.eps, opt.step_count as f64])
                    .expect("adam config shape"),
            );
            for (name, t) in &opt.m {
                w.tensor(&format!("{ADAM_M}{name}"), t);
            }
            for (name, t) in &opt.v {
                w.tensor(&format!("{ADAM_V}{name}"), t);
            }
        }
        for (key, t) in &self.train_state {
            w.tensor(&format!("{TRAIN}{key}"), t);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.magic(CHECKPOINT_MAGIC)?;
        let kind = match r.u8()? {
            0 => ModelKind::Efcn8,
            1 => ModelKind::Esegnet,
            k => return Err(format_err(format!("unknown model kind tag {k}"))),
        };
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let spec = ModelSpec {
            kind,
            in_channels: dims[0],
            num_classes: dims[1],
            base_width: dims[2],
            input_size: (dims[3], dims[4]),
            dropout_rate: r.f64()?,
        };
        spec.validate().map_err(|e| format_err(format!("bad model spec: {e}")))?;
        let seed = r.u64()?;
        let step_count = r.u64()?;
        let count = r.u32()? as usize;

        let mut model = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut adam_config = None;
        let mut train_state = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            let dup = if name == ADAM_CONFIG {
                adam_config.replace(t.into_f64()?).is_some()
            } else if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.insert(rest.to_string(), t.into_f32()?).is_some()
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.insert(rest.to_string(), t.into_f32()?).is_some()
            } else if let Some(rest) = name.strip_prefix(TRAIN) {
                train_state.insert(rest.to_string(), t.into_f64()?).is_some()
            } else {
                model.insert(name.clone(), t.into_f32()?).is_some()
            };
            if dup {
                return Err(format_err(format!("tensor '{name}' appears twice")));
            }
        }
        r.finish()?;
        let params = ModelParams::from_named(&spec, model).map_err(|e| format_err(e.to_string()))?;
        let optimizer = match adam_config {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(format_err("optimizer moments without adam.config".into())),
            Some(c) => {
                let c = c.data();
                if c.len() != 5 {
                    return Err(format_err("adam.config must hold 5 values".into()));
                }
                let config = AdamConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                };
                config.validate().map_err(|e| format_err(e.to_string()))?;
                for (name, t) in m.iter().chain(&v) {
                    let p = params
                        .trainable()
                        .get(name)
                        .ok_or_else(|| format_err(format!("moment for unknown parameter '{name}'")))?;
                    p.expect_same_shape(t).map_err(|e| format_err(e.to_string()))?;
                }
                Some(AdamState {
                    config,
                    m,
                    v,
                    step_count: c[4] as u64,
                })
            }
        };
        Ok(Checkpoint {
            spec,
            seed,
            step_count,
            params,
            optimizer,
            train_state,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &c.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes a single tensor in the dump format.
pub fn save_tensor_dump<F: Element>(path: &Path, name: &str, t: &Tensor<F>) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.bytes(DUMP_MAGIC);
    w.u32(FORMAT_VERSION);
    w.tensor(name, t);
    write_atomic(path, &w.0)
}

/// Reads a tensor dump, returning its name and values as f64.
pub fn load_tensor_dump(path: &Path) -> Result<(String, Tensor<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    r.magic(DUMP_MAGIC)?;
    let (name, t) = r.tensor()?;
    r.finish()?;
    let t = match t {
        Stored::F32(t) => t.cast(),
        Stored::F64(t) => t,
    };
    Ok((name, t))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_err(msg: String) -> Error {
    Error::CheckpointFormat(msg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn tensor<F: Element>(&mut self, name: &str, t: &Tensor<F>) {
        self.bytes(&(name.len() as u16).to_le_bytes());
        self.bytes(name.as_bytes());
        self.u8(F::DTYPE_TAG);
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            if F::DTYPE_TAG == 0 {
                self.bytes(&(v.as_f64() as f32).to_le_bytes());
            } else {
                self.f64(v.as_f64());
            }
        }
    }
}

enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            Stored::F32(t) => Ok(t),
            Stored::F64(_) => Err(format_err("expected an f32 tensor".into())),
        }
    }

    fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            Stored::F64(t) => Ok(t),
            Stored::F32(_) => Err(format_err("expected an f64 tensor".into())),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| format_err("file too short for a header".into()))?;
        if got != expected {
            return Err(format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<(String, Stored)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| format_err("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(format!("tensor '{name}' is too large")))?;
        let bad = |e: Error| format_err(format!("tensor '{name}': {e}"));
        let stored = match dtype {
            0 => {
                let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err("size overflow".into()))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Stored::F32(Tensor::new(&shape, data).map_err(bad)?)
            }
            1 => {
                let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err("size overflow".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Stored::F64(Tensor::new(&shape, data).map_err(bad)?)
            }
            d => return Err(format_err(format!("tensor '{name}' has unknown dtype {d}"))),
        };
        Ok((name, stored))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
