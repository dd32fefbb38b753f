//! Binds a [`ParamStore`] to a [`Tape`] and provides layer-level ops.

use crate::autograd::{FaultInjection, Gradients, Tape, Var};
use crate::error::Result;
use crate::params::{Conv, Linear, MlpLayers, Norm, ParamId, ParamStore};
use crate::tensor::{ImageTensor, Tensor, LAYER_NORM_EPS};

/// A forward pass in progress. Parameters are recorded on first use, as
/// learnable leaves when `trainable` and as constants otherwise.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self::with_tape(store, trainable, Tape::new())
    }

    pub fn with_fault(store: &'a ParamStore, fault: FaultInjection) -> Self {
        Self::with_tape(store, true, Tape::with_fault(fault))
    }

    fn with_tape(store: &'a ParamStore, trainable: bool, tape: Tape) -> Self {
        Self { tape, store, vars: vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { self.tape.param(t) } else { self.tape.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, img: &ImageTensor) -> Var {
        self.tape.constant(img.to_tensor())
    }

    pub fn image(&self, v: Var) -> Result<ImageTensor> {
        self.tape.real(v).to_image()
    }

    pub fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let (w, b) = (self.param(c.weight), self.param(c.bias));
        self.tape.conv2d(x, w, Some(b), c.kind)
    }

    pub fn norm(&mut self, n: &Norm, x: Var) -> Result<Var> {
        let (g, b) = (self.param(n.gamma), self.param(n.beta));
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let (w, b) = (self.param(l.weight), self.param(l.bias));
        self.tape.linear(x, w, b)
    }

    pub fn mlp(&mut self, m: &MlpLayers, x: Var) -> Result<Var> {
        let h = self.linear(&m.first, x)?;
        let h = self.tape.gelu(h);
        self.linear(&m.second, h)
    }

    /// Gradient for every stored tensor, zeros for unused ones.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .tensors()
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| match v {
                Some(v) => Tensor { shape: t.shape.clone(), data: grads.real(*v) },
                None => Tensor::zeros(t.shape.clone()),
            })
            .collect()
    }
}
