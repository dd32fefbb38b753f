//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in reverse, so a node's
//! gradient is complete by the time it is visited. Complex values (spectra)
//! carry gradients as `∂L/∂re + i·∂L/∂im`.
//!
//! A tape has a single owner; build one per forward pass.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{self, DftMethod};
use crate::tensor::{self, charbonnier_excess, ConvGeom, ConvKind, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value {
    Real(Tensor),
    /// A `C × H × W` spectrum.
    Complex { shape: [usize; 3], data: Vec<Complex64> },
}

impl Value {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Value::Real(t) => t.shape.clone(),
            Value::Complex { shape, .. } => shape.to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, h: usize, wd: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, f64),
    ScaleVar { x: Var, s: Var },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Upsample2(Var),
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Softmax { x: Var, group: usize },
    CombineBank { weights: Var, bank: Var, channels: usize, k: usize },
    Fft(Var),
    IfftReal(Var),
    CMulReal { z: Var, f: Var },
    CMul(Var, Var),
    CorrLogits { q: Var, k: Var },
    ScaleExpNeg { x: Var, a: Var, factor: f64 },
    ChannelMix { att: Var, p: Var },
    Charbonnier { x: Var, target: Vec<f64>, eps: f64 },
    SpectralCharbonnier { z: Var, target: Vec<Complex64>, eps: f64, scale: f64 },
    Dot { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Deliberate corruption of the backward pass, used to prove that the
/// gradient checker catches broken gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Doubles every parameter gradient.
    DoubleGrad,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    fault: FaultInjection,
    max_imag_residual: f64,
}

#[derive(Clone, Debug)]
enum Grad {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a real value, zeros if the value did not influence the
    /// loss.
    pub fn real(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(Grad::Real(g)) => g.clone(),
            _ => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn complex(&self, v: Var) -> Vec<Complex64> {
        match &self.grads[v.0] {
            Some(Grad::Complex(g)) => g.clone(),
            _ => vec![Complex64::new(0.0, 0.0); self.shapes[v.0].iter().product()],
        }
    }
}

fn accum_real(slot: &mut Option<Grad>, len: usize) -> &mut [f64] {
    if slot.is_none() {
        *slot = Some(Grad::Real(vec![0.0; len]));
    }
    match slot {
        Some(Grad::Real(g)) => g,
        _ => unreachable!("real gradient slot holds a complex gradient"),
    }
}

fn accum_complex(slot: &mut Option<Grad>, len: usize) -> &mut [Complex64] {
    if slot.is_none() {
        *slot = Some(Grad::Complex(vec![Complex64::new(0.0, 0.0); len]));
    }
    match slot {
        Some(Grad::Complex(g)) => g,
        _ => unreachable!("complex gradient slot holds a real gradient"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Self { fault, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest imaginary magnitude discarded by any inverse transform.
    pub fn max_imag_residual(&self) -> f64 {
        self.max_imag_residual
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Value, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A learnable leaf. Its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Value::Real(t), Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Real(t) => t,
            Value::Complex { .. } => panic!("expected a real value at node {}", v.0),
        }
    }

    pub fn complex(&self, v: Var) -> (&[usize; 3], &[Complex64]) {
        match &self.nodes[v.0].value {
            Value::Complex { shape, data } => (shape, data),
            Value::Real(_) => panic!("expected a complex value at node {}", v.0),
        }
    }

    fn real_checked(&self, v: Var) -> Result<&Tensor> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex { .. } => Err(Error::shape("expected a real value, got a spectrum")),
        }
    }

    fn complex_checked(&self, v: Var) -> Result<([usize; 3], &[Complex64])> {
        match &self.nodes[v.0].value {
            Value::Complex { shape, data } => Ok((*shape, data)),
            Value::Real(_) => Err(Error::shape("expected a spectrum, got a real value")),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.real(v).data[0]
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Real ops

    /// Convolution with weights `[out, in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kind: ConvKind) -> Result<Var> {
        let wt = self.real_checked(w)?;
        let (out_c, in_per_group, k) = match wt.shape[..] {
            [o, i, k1, k2] if k1 == k2 => (o, i, k1),
            _ => return Err(Error::shape(format!("conv weight shape {:?}", wt.shape))),
        };
        let xt = self.real_checked(x)?;
        let (c, h, wd) = xt.dims3()?;
        let in_c = if kind == ConvKind::Depthwise { out_c } else { in_per_group };
        let geom = ConvGeom::new(kind, in_c, out_c, k)?;
        if geom.weight_shape() != wt.shape {
            return Err(Error::shape(format!(
                "{kind:?} conv weight shape {:?}, expected {:?}",
                wt.shape,
                geom.weight_shape()
            )));
        }
        let (oh, ow) = geom.output_dims(c, h, wd)?;
        let bias = match b {
            Some(b) => {
                let bt = self.real_checked(b)?;
                if bt.data.len() != out_c {
                    return Err(Error::shape("conv bias length"));
                }
                Some(bt.data.as_slice())
            }
            None => None,
        };
        let out = tensor::conv_forward(&xt.data, h, wd, &wt.data, bias, &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            Value::Real(Tensor { shape: vec![out_c, oh, ow], data: out }),
            Op::Conv { x, w, b, geom, h, wd },
            &inputs,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.real_checked(a)?, self.real_checked(b)?);
        let data = ta.data.iter().zip(&tb.data).map(|(&p, &q)| f(p, q)).collect();
        let shape = ta.shape.clone();
        Ok(self.push_op(Value::Real(Tensor { shape, data }), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.real(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * c).collect() };
        self.push_op(Value::Real(out), Op::ScaleConst(x, c), &[x])
    }

    /// Multiplies `x` by a learnable scalar `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.real_checked(s)?;
        if sv.data.len() != 1 {
            return Err(Error::shape("scale_by expects a scalar"));
        }
        let sv = sv.data[0];
        let t = self.real_checked(x)?;
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * sv).collect() };
        Ok(self.push_op(Value::Real(out), Op::ScaleVar { x, s }, &[x, s]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.real(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| tensor::gelu(v)).collect() };
        self.push_op(Value::Real(out), Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.real(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| tensor::sigmoid(v)).collect() };
        self.push_op(Value::Real(out), Op::Sigmoid(x), &[x])
    }

    /// Channel layer-norm of a `C × H × W` value.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.real_checked(x)?.dims3()?;
        if self.real_checked(gamma)?.data.len() != c || self.real_checked(beta)?.data.len() != c {
            return Err(Error::shape("layer_norm gamma/beta length"));
        }
        let (out, xhat, inv_std) = tensor::layer_norm_forward(
            &self.real(x).data,
            c,
            h * w,
            &self.real(gamma).data,
            &self.real(beta).data,
            eps,
        );
        Ok(self.push_op(
            Value::Real(Tensor { shape: vec![c, h, w], data: out }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates `C_i × H × W` values along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.real_checked(parts[0])?.dims3()?;
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let t = self.real_checked(p)?;
            let (c, ph, pw) = t.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape("concat spatial mismatch"));
            }
            channels += c;
            data.extend_from_slice(&t.data);
        }
        Ok(self.push_op(
            Value::Real(Tensor { shape: vec![channels, h, w], data }),
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// Channels `start..start + len` of a `C × H × W` value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.real_checked(x)?.dims3()?;
        if start + len > c {
            return Err(Error::shape("channel slice out of range"));
        }
        let data = self.real(x).data[start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push_op(Value::Real(Tensor { shape: vec![len, h, w], data }), Op::Slice { x, start, len }, &[x]))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let t = self.real_checked(x)?;
        let (c, h, w) = t.dims3()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(ch * oh + y) * ow + xx] = t.data[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push_op(Value::Real(Tensor { shape: vec![c, oh, ow], data }), Op::Upsample2(x), &[x]))
    }

    /// Global average pooling, `C × H × W → C`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let img = self.real_checked(x)?.to_image()?;
        let data = tensor::global_avg_pool(&img);
        Ok(self.push_op(Value::Real(Tensor { shape: vec![data.len()], data }), Op::AvgPool(x), &[x]))
    }

    /// `w · x + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.real_checked(x)?, self.real_checked(w)?, self.real_checked(b)?);
        match wt.shape[..] {
            [o, i] if i == xt.data.len() && o == bt.data.len() => {}
            _ => {
                return Err(Error::shape(format!(
                    "linear: weight {:?}, input {}, bias {}",
                    wt.shape,
                    xt.data.len(),
                    bt.data.len()
                )))
            }
        }
        let data = tensor::affine(&wt.data, &bt.data, &xt.data);
        Ok(self.push_op(Value::Real(Tensor { shape: vec![data.len()], data }), Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Softmax over consecutive groups of `group` elements.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.real_checked(x)?;
        if group == 0 || t.data.len() % group != 0 {
            return Err(Error::shape(format!("softmax group {group} does not divide {}", t.data.len())));
        }
        let mut data = t.data.clone();
        data.chunks_mut(group).for_each(tensor::softmax_in_place);
        let shape = t.shape.clone();
        Ok(self.push_op(Value::Real(Tensor { shape, data }), Op::Softmax { x, group }, &[x]))
    }

    /// `out[c] = Σ_j weights[c, j] · bank[j]` for weights `C·k` and a bank of
    /// `k` maps of size `H × W`.
    pub fn combine_bank(&mut self, weights: Var, bank: Var) -> Result<Var> {
        let bt = self.real_checked(bank)?;
        let (k, h, w) = bt.dims3()?;
        let wt = self.real_checked(weights)?;
        if wt.data.len() % k != 0 {
            return Err(Error::shape(format!("{} weights for a bank of {k}", wt.data.len())));
        }
        let channels = wt.data.len() / k;
        let n = h * w;
        let mut data = vec![0.0; channels * n];
        for c in 0..channels {
            let out = &mut data[c * n..(c + 1) * n];
            for j in 0..k {
                let wj = wt.data[c * k + j];
                for (o, g) in out.iter_mut().zip(&bt.data[j * n..(j + 1) * n]) {
                    *o += wj * g;
                }
            }
        }
        Ok(self.push_op(
            Value::Real(Tensor { shape: vec![channels, h, w], data }),
            Op::CombineBank { weights, bank, channels, k },
            &[weights, bank],
        ))
    }

    // -----------------------------------------------------------------------
    // Spectral ops

    /// Forward 2D DFT of a real `C × H × W` value.
    pub fn fft(&mut self, x: Var) -> Result<Var> {
        let t = self.real_checked(x)?;
        let (c, h, w) = t.dims3()?;
        let data = spectral::forward_real(&t.data, h, w);
        Ok(self.push_op(Value::Complex { shape: [c, h, w], data }, Op::Fft(x), &[x]))
    }

    /// Real part of the inverse 2D DFT.
    pub fn ifft_real(&mut self, z: Var) -> Result<Var> {
        let (shape, data) = self.complex_checked(z)?;
        let [c, h, w] = shape;
        let (re, residual) = spectral::inverse_real(data, h, w);
        self.max_imag_residual = self.max_imag_residual.max(residual);
        Ok(self.push_op(Value::Real(Tensor { shape: vec![c, h, w], data: re }), Op::IfftReal(z), &[z]))
    }

    /// Spectrum times real per-bin gains of the same shape.
    pub fn cmul_real(&mut self, z: Var, f: Var) -> Result<Var> {
        let (shape, zd) = self.complex_checked(z)?;
        let ft = self.real_checked(f)?;
        if ft.shape != shape {
            return Err(Error::shape(format!("filter {:?} vs spectrum {shape:?}", ft.shape)));
        }
        let data = zd.iter().zip(&ft.data).map(|(z, g)| z * g).collect();
        Ok(self.push_op(Value::Complex { shape, data }, Op::CMulReal { z, f }, &[z, f]))
    }

    /// Element-wise product of two spectra.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, da) = self.complex_checked(a)?;
        let (sb, db) = self.complex_checked(b)?;
        if sa != sb {
            return Err(Error::shape(format!("{sa:?} vs {sb:?}")));
        }
        let data = da.iter().zip(db).map(|(p, q)| p * q).collect();
        Ok(self.push_op(Value::Complex { shape: sa, data }, Op::CMul(a, b), &[a, b]))
    }

    /// `S[c, d] = Σ_n Re(q[c, n] · conj(k[d, n]))`, a real `C × C` matrix.
    pub fn corr_logits(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, dq) = self.complex_checked(q)?;
        let (sk, dk) = self.complex_checked(k)?;
        if sq != sk {
            return Err(Error::shape(format!("{sq:?} vs {sk:?}")));
        }
        let [c, h, w] = sq;
        let n = h * w;
        let mut data = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                data[a * c + b] = dq[a * n..(a + 1) * n]
                    .iter()
                    .zip(&dk[b * n..(b + 1) * n])
                    .map(|(p, r)| p.re * r.re + p.im * r.im)
                    .sum();
            }
        }
        Ok(self.push_op(Value::Real(Tensor { shape: vec![c, c], data }), Op::CorrLogits { q, k }, &[q, k]))
    }

    /// `x · exp(−a) · factor` for a learnable scalar `a`.
    pub fn scale_exp_neg(&mut self, x: Var, a: Var, factor: f64) -> Result<Var> {
        let av = self.real_checked(a)?;
        if av.data.len() != 1 {
            return Err(Error::shape("scale_exp_neg expects a scalar"));
        }
        let s = (-av.data[0]).exp() * factor;
        let t = self.real_checked(x)?;
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * s).collect() };
        Ok(self.push_op(Value::Real(out), Op::ScaleExpNeg { x, a, factor }, &[x, a]))
    }

    /// `out[c] = Σ_d att[c, d] · p[d]` for a real `C × C` matrix and a
    /// `C × H × W` spectrum.
    pub fn channel_mix(&mut self, att: Var, p: Var) -> Result<Var> {
        let (shape, pd) = self.complex_checked(p)?;
        let at = self.real_checked(att)?;
        let c = shape[0];
        if at.data.len() != c * c {
            return Err(Error::shape(format!("attention {:?} for {c} channels", at.shape)));
        }
        let n = shape[1] * shape[2];
        let mut data = vec![Complex64::new(0.0, 0.0); c * n];
        for a in 0..c {
            let out = &mut data[a * n..(a + 1) * n];
            for b in 0..c {
                let w = at.data[a * c + b];
                for (o, z) in out.iter_mut().zip(&pd[b * n..(b + 1) * n]) {
                    *o += z * w;
                }
            }
        }
        Ok(self.push_op(Value::Complex { shape, data }, Op::ChannelMix { att, p }, &[att, p]))
    }

    // -----------------------------------------------------------------------
    // Scalar reductions

    /// Mean Charbonnier distance `sqrt((x − t)² + eps²)` to a constant target.
    pub fn charbonnier(&mut self, x: Var, target: &[f64], eps: f64) -> Result<Var> {
        let t = self.real_checked(x)?;
        if t.data.len() != target.len() {
            return Err(Error::shape("charbonnier target length"));
        }
        let sum: f64 = t.data.iter().zip(target).map(|(a, b)| charbonnier_excess(a - b, eps)).sum();
        let value = eps + sum / target.len() as f64;
        Ok(self.push_op(
            Value::Real(Tensor::scalar(value)),
            Op::Charbonnier { x, target: target.to_vec(), eps },
            &[x],
        ))
    }

    /// Charbonnier on real and imaginary parts of `scale · (z − target)`,
    /// averaged over all `2N` components.
    pub fn spectral_charbonnier(&mut self, z: Var, target: &[Complex64], eps: f64, scale: f64) -> Result<Var> {
        let (_, zd) = self.complex_checked(z)?;
        if zd.len() != target.len() {
            return Err(Error::shape("spectral charbonnier target length"));
        }
        let mut sum = 0.0;
        for (a, b) in zd.iter().zip(target) {
            let d = (a - b) * scale;
            sum += charbonnier_excess(d.re, eps) + charbonnier_excess(d.im, eps);
        }
        let value = eps + sum / (2 * target.len()) as f64;
        Ok(self.push_op(
            Value::Real(Tensor::scalar(value)),
            Op::SpectralCharbonnier { z, target: target.to_vec(), eps, scale },
            &[z],
        ))
    }

    /// `Σ x · weights` with constant weights.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.real_checked(x)?;
        if t.data.len() != weights.len() {
            return Err(Error::shape("dot weights length"));
        }
        let value = t.data.iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push_op(Value::Real(Tensor::scalar(value)), Op::Dot { x, weights: weights.to_vec() }, &[x]))
    }

    // -----------------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.real_checked(loss)?;
        if lt.data.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        if !lt.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.data[0])));
        }
        let mut grads: Vec<Option<Grad>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Grad::Real(vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        if self.fault == FaultInjection::DoubleGrad {
            for p in &self.params {
                match &mut grads[p.0] {
                    Some(Grad::Real(g)) => g.iter_mut().for_each(|v| *v *= 2.0),
                    Some(Grad::Complex(g)) => g.iter_mut().for_each(|v| *v *= 2.0),
                    None => {}
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn len_of(&self, v: Var) -> usize {
        match &self.nodes[v.0].value {
            Value::Real(t) => t.data.len(),
            Value::Complex { data, .. } => data.len(),
        }
    }

    fn propagate(&self, node: &Node, g: &Grad, grads: &mut [Option<Grad>]) {
        let rg = || match g {
            Grad::Real(v) => v.as_slice(),
            Grad::Complex(_) => unreachable!("real node with complex gradient"),
        };
        let cg = || match g {
            Grad::Complex(v) => v.as_slice(),
            Grad::Real(_) => unreachable!("complex node with real gradient"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, h, wd } => {
                let g = rg();
                let (xv, wv) = (&self.real(*x).data, &self.real(*w).data);
                let (lx, lw) = (self.len_of(*x), self.len_of(*w));
                let mut dx = self.wants(*x).then(|| vec![0.0; lx]);
                let mut dw = self.wants(*w).then(|| vec![0.0; lw]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![0.0; geom.out_channels]);
                tensor::conv_backward(
                    xv,
                    *h,
                    *wd,
                    wv,
                    geom,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    add_into(accum_real(&mut grads[x.0], lx), &d);
                }
                if let Some(d) = dw {
                    add_into(accum_real(&mut grads[w.0], lw), &d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    add_into(accum_real(&mut grads[b.0], d.len()), &d);
                }
            }
            Op::Add(a, b) => {
                let g = rg();
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(accum_real(&mut grads[v.0], g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                let g = rg();
                if self.wants(*a) {
                    add_into(accum_real(&mut grads[a.0], g.len()), g);
                }
                if self.wants(*b) {
                    let d = accum_real(&mut grads[b.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let g = rg();
                let (av, bv) = (&self.real(*a).data, &self.real(*b).data);
                if self.wants(*a) {
                    let d = accum_real(&mut grads[a.0], g.len());
                    for ((d, g), q) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * q;
                    }
                }
                if self.wants(*b) {
                    let d = accum_real(&mut grads[b.0], g.len());
                    for ((d, g), p) in d.iter_mut().zip(g).zip(av) {
                        *d += g * p;
                    }
                }
            }
            Op::ScaleConst(x, c) => {
                let g = rg();
                if self.wants(*x) {
                    let d = accum_real(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::ScaleVar { x, s } => {
                let g = rg();
                let sv = self.real(*s).data[0];
                let xv = &self.real(*x).data;
                if self.wants(*x) {
                    let d = accum_real(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv);
                }
                if self.wants(*s) {
                    let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    accum_real(&mut grads[s.0], 1)[0] += dot;
                }
            }
            Op::Gelu(x) => {
                let g = rg();
                let xv = &self.real(*x).data;
                let d = accum_real(&mut grads[x.0], g.len());
                for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                    *d += g * tensor::gelu_grad(*v);
                }
            }
            Op::Sigmoid(x) => {
                let g = rg();
                let Value::Real(y) = &node.value else { unreachable!() };
                let d = accum_real(&mut grads[x.0], g.len());
                for ((d, g), y) in d.iter_mut().zip(g).zip(&y.data) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let g = rg();
                let gam = &self.real(*gamma).data;
                let c = gam.len();
                let n = inv_std.len();
                if self.wants(*gamma) {
                    let d = accum_real(&mut grads[gamma.0], c);
                    for ch in 0..c {
                        d[ch] += g[ch * n..(ch + 1) * n].iter().zip(&xhat[ch * n..(ch + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.wants(*beta) {
                    let d = accum_real(&mut grads[beta.0], c);
                    for ch in 0..c {
                        d[ch] += g[ch * n..(ch + 1) * n].iter().sum::<f64>();
                    }
                }
                if self.wants(*x) {
                    let mut sum_d = vec![0.0; n];
                    let mut sum_dx = vec![0.0; n];
                    for ch in 0..c {
                        for p in 0..n {
                            let dxh = g[ch * n + p] * gam[ch];
                            sum_d[p] += dxh;
                            sum_dx[p] += dxh * xhat[ch * n + p];
                        }
                    }
                    let d = accum_real(&mut grads[x.0], c * n);
                    let cf = c as f64;
                    for ch in 0..c {
                        for p in 0..n {
                            let i = ch * n + p;
                            let dxh = g[i] * gam[ch];
                            d[i] += inv_std[p] / cf * (cf * dxh - sum_d[p] - xhat[i] * sum_dx[p]);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let g = rg();
                let mut off = 0;
                for p in parts {
                    let len = self.len_of(*p);
                    if self.wants(*p) {
                        add_into(accum_real(&mut grads[p.0], len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice { x, start, len } => {
                let g = rg();
                let (c, h, w) = self.real(*x).dims3().expect("rank 3");
                let n = h * w;
                let d = accum_real(&mut grads[x.0], c * n);
                add_into(&mut d[start * n..(start + len) * n], g);
            }
            Op::Upsample2(x) => {
                let g = rg();
                let (c, h, w) = self.real(*x).dims3().expect("rank 3");
                let ow = 2 * w;
                let d = accum_real(&mut grads[x.0], c * h * w);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * ow + xx];
                        }
                    }
                }
            }
            Op::AvgPool(x) => {
                let g = rg();
                let (c, h, w) = self.real(*x).dims3().expect("rank 3");
                let n = h * w;
                let d = accum_real(&mut grads[x.0], c * n);
                for ch in 0..c {
                    let gv = g[ch] / n as f64;
                    d[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::Linear { x, w, b } => {
                let g = rg();
                let xv = &self.real(*x).data;
                let wv = &self.real(*w).data;
                let n_in = xv.len();
                if self.wants(*x) {
                    let d = accum_real(&mut grads[x.0], n_in);
                    for (o, go) in g.iter().enumerate() {
                        for (d, wv) in d.iter_mut().zip(&wv[o * n_in..(o + 1) * n_in]) {
                            *d += go * wv;
                        }
                    }
                }
                if self.wants(*w) {
                    let d = accum_real(&mut grads[w.0], wv.len());
                    for (o, go) in g.iter().enumerate() {
                        for (d, xv) in d[o * n_in..(o + 1) * n_in].iter_mut().zip(xv) {
                            *d += go * xv;
                        }
                    }
                }
                if self.wants(*b) {
                    add_into(accum_real(&mut grads[b.0], g.len()), g);
                }
            }
            Op::Softmax { x, group } => {
                let g = rg();
                let Value::Real(y) = &node.value else { unreachable!() };
                let d = accum_real(&mut grads[x.0], g.len());
                for ((dc, gc), yc) in d.chunks_mut(*group).zip(g.chunks(*group)).zip(y.data.chunks(*group)) {
                    let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for ((d, g), y) in dc.iter_mut().zip(gc).zip(yc) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::CombineBank { weights, bank, channels, k } => {
                let g = rg();
                let wv = &self.real(*weights).data;
                let bv = &self.real(*bank).data;
                let n = bv.len() / k;
                if self.wants(*weights) {
                    let d = accum_real(&mut grads[weights.0], channels * k);
                    for c in 0..*channels {
                        let gc = &g[c * n..(c + 1) * n];
                        for j in 0..*k {
                            d[c * k + j] += gc.iter().zip(&bv[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.wants(*bank) {
                    let d = accum_real(&mut grads[bank.0], bv.len());
                    for j in 0..*k {
                        let dj = &mut d[j * n..(j + 1) * n];
                        for c in 0..*channels {
                            let wj = wv[c * k + j];
                            for (d, g) in dj.iter_mut().zip(&g[c * n..(c + 1) * n]) {
                                *d += wj * g;
                            }
                        }
                    }
                }
            }
            Op::Fft(x) => {
                // Adjoint of the unnormalized DFT: unnormalized inverse, real part.
                let g = cg();
                let (c, h, w) = self.real(*x).dims3().expect("rank 3");
                let mut buf = g.to_vec();
                spectral::transform_planes(&mut buf, h, w, true, DftMethod::Auto);
                let d = accum_real(&mut grads[x.0], c * h * w);
                for (d, z) in d.iter_mut().zip(&buf) {
                    *d += z.re;
                }
            }
            Op::IfftReal(z) => {
                let g = rg();
                let (shape, _) = self.complex(*z);
                let [_, h, w] = *shape;
                let mut buf = spectral::forward_real(g, h, w);
                let s = 1.0 / (h * w) as f64;
                buf.iter_mut().for_each(|v| *v *= s);
                add_into_c(accum_complex(&mut grads[z.0], buf.len()), &buf);
            }
            Op::CMulReal { z, f } => {
                let g = cg();
                let (_, zd) = self.complex(*z);
                let fv = &self.real(*f).data;
                if self.wants(*z) {
                    let d = accum_complex(&mut grads[z.0], g.len());
                    for ((d, g), f) in d.iter_mut().zip(g).zip(fv) {
                        *d += g * f;
                    }
                }
                if self.wants(*f) {
                    let d = accum_real(&mut grads[f.0], g.len());
                    for ((d, g), z) in d.iter_mut().zip(g).zip(zd) {
                        *d += g.re * z.re + g.im * z.im;
                    }
                }
            }
            Op::CMul(a, b) => {
                let g = cg();
                let (_, ad) = self.complex(*a);
                let (_, bd) = self.complex(*b);
                if self.wants(*a) {
                    let d = accum_complex(&mut grads[a.0], g.len());
                    for ((d, g), q) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * q.conj();
                    }
                }
                if self.wants(*b) {
                    let d = accum_complex(&mut grads[b.0], g.len());
                    for ((d, g), p) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * p.conj();
                    }
                }
            }
            Op::CorrLogits { q, k } => {
                let g = rg();
                let (shape, qd) = self.complex(*q);
                let (_, kd) = self.complex(*k);
                let [c, h, w] = *shape;
                let n = h * w;
                if self.wants(*q) {
                    let d = accum_complex(&mut grads[q.0], c * n);
                    for a in 0..c {
                        for b in 0..c {
                            let s = g[a * c + b];
                            for (d, kv) in d[a * n..(a + 1) * n].iter_mut().zip(&kd[b * n..(b + 1) * n]) {
                                *d += kv * s;
                            }
                        }
                    }
                }
                if self.wants(*k) {
                    let d = accum_complex(&mut grads[k.0], c * n);
                    for a in 0..c {
                        for b in 0..c {
                            let s = g[a * c + b];
                            for (d, qv) in d[b * n..(b + 1) * n].iter_mut().zip(&qd[a * n..(a + 1) * n]) {
                                *d += qv * s;
                            }
                        }
                    }
                }
            }
            Op::ScaleExpNeg { x, a, factor } => {
                let g = rg();
                let s = (-self.real(*a).data[0]).exp() * factor;
                if self.wants(*x) {
                    let d = accum_real(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
                if self.wants(*a) {
                    let Value::Real(y) = &node.value else { unreachable!() };
                    let dot: f64 = g.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                    accum_real(&mut grads[a.0], 1)[0] -= dot;
                }
            }
            Op::ChannelMix { att, p } => {
                let g = cg();
                let (shape, pd) = self.complex(*p);
                let av = &self.real(*att).data;
                let c = shape[0];
                let n = shape[1] * shape[2];
                if self.wants(*p) {
                    let d = accum_complex(&mut grads[p.0], c * n);
                    for a in 0..c {
                        for b in 0..c {
                            let w = av[a * c + b];
                            for (d, g) in d[b * n..(b + 1) * n].iter_mut().zip(&g[a * n..(a + 1) * n]) {
                                *d += g * w;
                            }
                        }
                    }
                }
                if self.wants(*att) {
                    let d = accum_real(&mut grads[att.0], c * c);
                    for a in 0..c {
                        for b in 0..c {
                            d[a * c + b] += g[a * n..(a + 1) * n]
                                .iter()
                                .zip(&pd[b * n..(b + 1) * n])
                                .map(|(g, p)| g.re * p.re + g.im * p.im)
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::Charbonnier { x, target, eps } => {
                let g = rg()[0] / target.len() as f64;
                let xv = &self.real(*x).data;
                let d = accum_real(&mut grads[x.0], xv.len());
                for ((d, a), b) in d.iter_mut().zip(xv).zip(target) {
                    let diff = a - b;
                    *d += g * diff / (diff * diff + eps * eps).sqrt();
                }
            }
            Op::SpectralCharbonnier { z, target, eps, scale } => {
                let g = rg()[0] / (2 * target.len()) as f64;
                let (_, zd) = self.complex(*z);
                let d = accum_complex(&mut grads[z.0], zd.len());
                for ((d, a), b) in d.iter_mut().zip(zd).zip(target) {
                    let e = (a - b) * scale;
                    let re = e.re / (e.re * e.re + eps * eps).sqrt();
                    let im = e.im / (e.im * e.im + eps * eps).sqrt();
                    *d += Complex64::new(re, im) * (g * scale);
                }
            }
            Op::Dot { x, weights } => {
                let g = rg()[0];
                let d = accum_real(&mut grads[x.0], weights.len());
                d.iter_mut().zip(weights).for_each(|(d, w)| *d += g * w);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn add_into_c(dst: &mut [Complex64], src: &[Complex64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
