//! Named parameter storage and initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, ConvKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Two linear layers with GELU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpLayers {
    pub first: Linear,
    pub second: Linear,
}

/// Adds freshly initialized parameters to a store.
///
/// Convolution and linear weights and biases are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor { shape, data }
    }

    pub fn conv(&mut self, name: &str, kind: ConvKind, in_c: usize, out_c: usize, k: usize) -> Result<Conv> {
        let geom = ConvGeom::new(kind, in_c, out_c, k)?;
        let bound = 1.0 / (geom.fan_in() as f64).sqrt();
        let w = self.uniform(geom.weight_shape(), bound);
        let b = self.uniform(vec![out_c], bound);
        Ok(Conv {
            kind,
            in_channels: in_c,
            out_channels: out_c,
            weight: self.store.add(format!("{name}.weight"), w)?,
            bias: self.store.add(format!("{name}.bias"), b)?,
        })
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
        })
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = self.uniform(vec![output, input], bound);
        let b = self.uniform(vec![output], bound);
        Ok(Linear {
            weight: self.store.add(format!("{name}.weight"), w)?,
            bias: self.store.add(format!("{name}.bias"), b)?,
        })
    }

    pub fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Result<MlpLayers> {
        Ok(MlpLayers {
            first: self.linear(&format!("{name}.fc1"), input, hidden)?,
            second: self.linear(&format!("{name}.fc2"), hidden, output)?,
        })
    }

    /// `k` maps of ones plus Gaussian jitter of std 0.01.
    pub fn filter_bank(&mut self, name: &str, k: usize, height: usize, width: usize) -> Result<ParamId> {
        let data = (0..k * height * width)
            .map(|_| 1.0 + 0.01 * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.store.add(name, Tensor { shape: vec![k, height, width], data })
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::scalar(value))
    }
}
