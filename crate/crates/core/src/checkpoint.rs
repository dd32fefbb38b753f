//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCEN" | version u32 | config length u32 | config text (key=value lines)
//! tensor count u32 | tensors
//! optimizer flag u8 | [step u64 | total u64 | lr_init, lr_min, beta1, beta2, eps f64
//!                      | m tensors | v tensors]
//! tensor: name length u16 | name | dtype u8 | rank u8 | dims u32 × rank | payload
//! ```
//!
//! Payloads are f32. Moment tensors carry the names of their parameters and
//! appear in the same order, one per parameter.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::network::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::training::OptimState;

pub const MAGIC: &[u8; 4] = b"FCEN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_tensor(name: &str, t: &Tensor) -> Self {
        Self { name: name.to_string(), dims: t.shape.clone(), data: t.data.iter().map(|&v| v as f32).collect() }
    }

    fn to_tensor(&self) -> Tensor {
        Tensor { shape: self.dims.clone(), data: self.data.iter().map(|&v| v as f64).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimRecord {
    pub step: u64,
    pub total_steps: u64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub optim: Option<OptimRecord>,
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "model.base_channels={}\nmodel.blocks_per_scale={}\nmodel.k_filters={}\nmodel.patch={}\n",
        c.base_channels, c.blocks_per_scale, c.k_filters, c.patch
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut fields: [Option<usize>; 4] = [None; 4];
    let keys = ["model.base_channels", "model.blocks_per_scale", "model.k_filters", "model.patch"];
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("config line {line:?}")))?;
        let i = keys.iter().position(|key| *key == k).ok_or_else(|| Error::Checkpoint(format!("config key {k:?}")))?;
        if fields[i].is_some() {
            return Err(Error::Checkpoint(format!("duplicate config key {k:?}")));
        }
        fields[i] = Some(v.parse().map_err(|_| Error::Checkpoint(format!("config value {v:?}")))?);
    }
    let get = |i: usize| fields[i].ok_or_else(|| Error::Checkpoint(format!("missing config key {}", keys[i])));
    let config = ModelConfig { base_channels: get(0)?, blocks_per_scale: get(1)?, k_filters: get(2)?, patch: get(3)? };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(config)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize, what: &str) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in 32 bits")))?);
        Ok(())
    }
    fn tensor(&mut self, t: &NamedTensor) -> Result<()> {
        let name = t.name.as_bytes();
        self.u16(u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name of {} bytes", name.len())))?);
        self.0.extend_from_slice(name);
        self.u8(DTYPE_F32);
        self.u8(u8::try_from(t.dims.len()).map_err(|_| Error::Checkpoint(format!("rank {}", t.dims.len())))?);
        for &d in &t.dims {
            self.len32(d, "dimension")?;
        }
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!("{}: dims {:?} but {} values", t.name, t.dims, t.data.len())));
        }
        for v in &t.data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
    fn tensors(&mut self, ts: &[NamedTensor]) -> Result<()> {
        self.len32(ts.len(), "tensor count")?;
        ts.iter().try_for_each(|t| self.tensor(t))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
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
    fn tensor(&mut self) -> Result<NamedTensor> {
        let n = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(NamedTensor { name, dims, data })
    }
    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32()? as usize;
        let mut out: Vec<NamedTensor> = Vec::new();
        for _ in 0..n {
            let t = self.tensor()?;
            if out.iter().any(|o| o.name == t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {:?}", t.name)));
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn same_layout(a: &[NamedTensor], b: &[NamedTensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.dims == y.dims)
}

impl Checkpoint {
    pub fn from_weights(weights: &ModelWeights, optim: Option<&OptimState>) -> Self {
        let tensors: Vec<NamedTensor> = weights.store.iter().map(|(n, t)| NamedTensor::from_tensor(n, t)).collect();
        let optim = optim.map(|s| {
            let moments = |ms: &[Tensor]| tensors.iter().zip(ms).map(|(p, m)| NamedTensor::from_tensor(&p.name, m)).collect();
            OptimRecord {
                step: s.step,
                total_steps: s.total_steps,
                lr_init: s.lr_init,
                lr_min: s.lr_min,
                beta1: s.beta1,
                beta2: s.beta2,
                adam_eps: s.adam_eps,
                m: moments(&s.m),
                v: moments(&s.v),
            }
        });
        Self { config: weights.config, tensors, optim }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_weights(&self) -> Result<ModelWeights> {
        let mut weights = ModelWeights::init(self.config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.tensors.len() != weights.store.len() {
            return Err(Error::Checkpoint(format!("{} tensors, model has {}", self.tensors.len(), weights.store.len())));
        }
        for t in &self.tensors {
            let id = weights.store.find(&t.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", t.name)))?;
            let slot = weights.store.get_mut(id);
            if slot.shape != t.dims {
                return Err(Error::Checkpoint(format!("{}: dims {:?}, model expects {:?}", t.name, t.dims, slot.shape)));
            }
            *slot = t.to_tensor();
        }
        Ok(weights)
    }

    /// Optimizer state aligned with the parameters of [`Self::to_weights`].
    pub fn optim_state(&self, weights: &ModelWeights) -> Result<Option<OptimState>> {
        let Some(r) = &self.optim else { return Ok(None) };
        let order: Vec<NamedTensor> = weights.store.iter().map(|(n, t)| NamedTensor { name: n.into(), dims: t.shape.clone(), data: vec![] }).collect();
        let pick = |ms: &[NamedTensor]| -> Result<Vec<Tensor>> {
            order
                .iter()
                .map(|p| {
                    ms.iter().find(|m| m.name == p.name && m.dims == p.dims).map(|m| m.to_tensor()).ok_or_else(|| Error::Checkpoint(format!("missing moment for {}", p.name)))
                })
                .collect()
        };
        Ok(Some(OptimState {
            step: r.step,
            lr_init: r.lr_init,
            lr_min: r.lr_min,
            total_steps: r.total_steps,
            beta1: r.beta1,
            beta2: r.beta2,
            adam_eps: r.adam_eps,
            m: pick(&r.m)?,
            v: pick(&r.v)?,
        }))
    }

    /// Scalars stored in the model tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.dims.iter().product::<usize>()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let text = config_text(&self.config);
        w.len32(text.len(), "config length")?;
        w.0.extend_from_slice(text.as_bytes());
        w.tensors(&self.tensors)?;
        match &self.optim {
            None => w.u8(0),
            Some(r) => {
                if !same_layout(&r.m, &self.tensors) || !same_layout(&r.v, &self.tensors) {
                    return Err(Error::Checkpoint("moment tensors do not match the parameters".into()));
                }
                w.u8(1);
                w.u64(r.step);
                w.u64(r.total_steps);
                for v in [r.lr_init, r.lr_min, r.beta1, r.beta2, r.adam_eps] {
                    w.f64(v);
                }
                w.tensors(&r.m)?;
                w.tensors(&r.v)?;
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| Error::Checkpoint("file too short".into()))? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = parse_config(text)?;
        let tensors = r.tensors()?;
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let (step, total_steps) = (r.u64()?, r.u64()?);
                let (lr_init, lr_min, beta1, beta2, adam_eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let (m, v) = (r.tensors()?, r.tensors()?);
                if !same_layout(&m, &tensors) || !same_layout(&v, &tensors) {
                    return Err(Error::Checkpoint("moment tensors do not match the parameters".into()));
                }
                Some(OptimRecord { step, total_steps, lr_init, lr_min, beta1, beta2, adam_eps, m, v })
            }
            f => return Err(Error::Checkpoint(format!("optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config, tensors, optim })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
