//! Dense real tensors and the neural building blocks used by the network:
//! convolution, channel layer-norm, pooling, a two-layer MLP, softmax and
//! the GELU activation.
//!
//! The functions here are pure forward kernels. The differentiable versions
//! recorded on a [`Tape`](crate::autograd::Tape) call into the same kernels
//! and add their vector-Jacobian products.

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// A real-valued `channels × height × width` array stored row-major in
/// `(c, y, x)` order. Carries both images (values in `[0, 1]`) and feature
/// maps (unbounded).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies channel `c` out as a single-channel image.
    pub fn extract_channel(&self, c: usize) -> ImageTensor {
        ImageTensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Repeats a single-channel image `channels` times.
    pub fn broadcast_channels(&self, channels: usize) -> Result<ImageTensor> {
        if self.channels != 1 {
            return Err(Error::shape(format!(
                "can only broadcast a 1-channel image, got {}",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        ImageTensor::new(channels, self.height, self.width, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.check_same_shape(other)?;
        Ok(ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp01(&self) -> ImageTensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Crops a `height × width` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Circular shift by `(dy, dx)` pixels.
    pub fn roll(&self, dy: isize, dx: isize) -> ImageTensor {
        let (h, w) = (self.height as isize, self.width as isize);
        ImageTensor::from_fn(self.channels, self.height, self.width, |c, y, x| {
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            self.get(c, sy, sx)
        })
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.channels, self.height, self.width], data: self.data.clone() }
    }
}

/// A real tensor of arbitrary rank. Used for parameters and for the values
/// recorded on the autodiff tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `C × H × W`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub fn to_image(&self) -> Result<ImageTensor> {
        let (c, h, w) = self.dims3()?;
        ImageTensor::new(c, h, w, self.data.clone())
    }
}

impl From<ImageTensor> for Tensor {
    fn from(img: ImageTensor) -> Self {
        Tensor { shape: vec![img.channels, img.height, img.width], data: img.data }
    }
}

// ---------------------------------------------------------------------------
// Activations

/// Element-wise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
/// `sqrt(d² + eps²) − eps`, written so that it is exactly zero at `d = 0`.
pub(crate) fn charbonnier_excess(d: f64, eps: f64) -> f64 {
    d * d / ((d * d + eps * eps).sqrt() + eps)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU applied element-wise.
pub fn activation(input: &ImageTensor) -> ImageTensor {
    input.map(gelu)
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Convolution flavour. Pointwise is a 1×1 standard conv; strided-down is a
/// 3×3 standard conv with stride 2; depthwise has one filter per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Pointwise,
    Depthwise,
    StridedDown,
}

/// Geometry of a convolution, shared by the pure kernel and the tape op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(kind: ConvKind, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let (kernel, stride, groups) = match kind {
            ConvKind::Standard => (kernel, 1, 1),
            ConvKind::Pointwise => (1, 1, 1),
            ConvKind::Depthwise => {
                if in_channels != out_channels {
                    return Err(Error::invalid(format!(
                        "depthwise conv needs in == out channels, got {in_channels} -> {out_channels}"
                    )));
                }
                (kernel, 1, in_channels)
            }
            ConvKind::StridedDown => (kernel, 2, 1),
        };
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("conv with zero channels"));
        }
        Ok(Self { in_channels, out_channels, kernel, stride, groups })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    /// Output spatial size, checking channel count and stride divisibility.
    pub fn output_dims(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} is not divisible by stride {}",
                self.stride
            )));
        }
        Ok((h / self.stride, w / self.stride))
    }
}

/// Parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kind: ConvKind,
    pub geom: ConvGeom,
    /// `[out, in / groups, k, k]` row-major.
    pub weights: Vec<f64>,
    /// One entry per output channel.
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let geom = ConvGeom::new(kind, in_channels, out_channels, kernel)?;
        if weights.len() != geom.weight_len() {
            return Err(Error::shape(format!(
                "conv weights: expected {} values for {:?}, got {}",
                geom.weight_len(),
                geom.weight_shape(),
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "conv bias: expected {out_channels} values, got {}",
                bias.len()
            )));
        }
        Ok(Self { kind, geom, weights, bias })
    }

    pub fn zeros(kind: ConvKind, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let geom = ConvGeom::new(kind, in_channels, out_channels, kernel)?;
        Ok(Self { kind, geom, weights: vec![0.0; geom.weight_len()], bias: vec![0.0; out_channels] })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Zero-padded 2D convolution; stride 1 preserves spatial size.
pub fn conv2d(params: &ConvParams, input: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = input.dims();
    let (oh, ow) = params.geom.output_dims(c, h, w)?;
    let out = conv_forward(input.data(), h, w, &params.weights, Some(&params.bias), &params.geom);
    ImageTensor::new(params.geom.out_channels, oh, ow, out)
}

/// Range of output columns `ox` whose input column `ox * s + k - pad` lies in
/// `[0, w)`.
#[inline]
fn valid_range(w: usize, ow: usize, s: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    let hi = if w + pad > k { ((w - 1 + pad - k) / s + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Patch matrix of one channel group: row `(ic * k + ky) * k + kx` holds the
/// input values read by that tap at every output position, zero outside.
fn im2col(x: &[f64], h: usize, w: usize, channels: usize, g: &ConvGeom) -> Vec<f64> {
    let (s, k) = (g.stride, g.kernel);
    let pad = k / 2;
    let (oh, ow) = (h / s, w / s);
    let mut col = vec![0.0; channels * k * k * oh * ow];
    for ic in 0..channels {
        let xin = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, oh, s, ky, pad);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, ow, s, kx, pad);
                let row = &mut col[((ic * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let irow = &xin[(oy * s + ky - pad) * w..][..w];
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        orow[xlo..xhi].copy_from_slice(&irow[xlo + kx - pad..xhi + kx - pad]);
                    } else {
                        for ox in xlo..xhi {
                            orow[ox] = irow[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im(col: &[f64], h: usize, w: usize, channels: usize, g: &ConvGeom, dx: &mut [f64]) {
    let (s, k) = (g.stride, g.kernel);
    let pad = k / 2;
    let (oh, ow) = (h / s, w / s);
    for ic in 0..channels {
        let din = &mut dx[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(h, oh, s, ky, pad);
            for kx in 0..k {
                let (xlo, xhi) = valid_range(w, ow, s, kx, pad);
                let row = &col[((ic * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in ylo..yhi {
                    let drow = &mut din[(oy * s + ky - pad) * w..][..w];
                    let grow = &row[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        drow[ox * s + kx - pad] += grow[ox];
                    }
                }
            }
        }
    }
}

fn is_identity_patch(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1
}

/// `out += a · b` for row-major `a: [rows, inner]`, `b: [inner, n]` and
/// `out: [rows, n]`. Four output rows share each pass over `b`.
fn matmul_acc(a: &[f64], rows: usize, inner: usize, b: &[f64], n: usize, out: &mut [f64]) {
    let mut blocks = out.chunks_exact_mut(4 * n);
    for (blk, o) in (&mut blocks).enumerate() {
        let (o0, rest) = o.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let r = 4 * blk;
        for (j, brow) in b.chunks_exact(n).take(inner).enumerate() {
            let (a0, a1, a2, a3) = (a[r * inner + j], a[(r + 1) * inner + j], a[(r + 2) * inner + j], a[(r + 3) * inner + j]);
            for ((((x0, x1), x2), x3), bv) in o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()).zip(brow) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
    }
    let done = rows / 4 * 4;
    for (i, o) in blocks.into_remainder().chunks_exact_mut(n).enumerate() {
        let r = done + i;
        for (j, brow) in b.chunks_exact(n).take(inner).enumerate() {
            let av = a[r * inner + j];
            for (x, bv) in o.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Zero-padded convolution on raw `[C, H, W]` data.
pub(crate) fn conv_forward(
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let (oh, ow) = (h / g.stride, w / g.stride);
    let n = oh * ow;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let taps = cin_g * g.kernel * g.kernel;
    let mut out = vec![0.0; g.out_channels * n];
    if let Some(b) = bias {
        for (o, bv) in out.chunks_mut(n).zip(b) {
            o.iter_mut().for_each(|v| *v = *bv);
        }
    }
    for group in 0..g.groups {
        let xg = &x[group * cin_g * h * w..(group + 1) * cin_g * h * w];
        let owned;
        let col: &[f64] = if is_identity_patch(g) {
            xg
        } else {
            owned = im2col(xg, h, w, cin_g, g);
            &owned
        };
        let wg = &weight[group * cout_g * taps..(group + 1) * cout_g * taps];
        matmul_acc(wg, cout_g, taps, col, n, &mut out[group * cout_g * n..(group + 1) * cout_g * n]);
    }
    out
}

/// Vector-Jacobian product of [`conv_forward`]: accumulates into `dx`, `dw`
/// and `db` (each optional).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    g: &ConvGeom,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (oh, ow) = (h / g.stride, w / g.stride);
    let n = oh * ow;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let taps = cin_g * g.kernel * g.kernel;
    if let Some(db) = db {
        for oc in 0..g.out_channels {
            db[oc] += dout[oc * n..(oc + 1) * n].iter().sum::<f64>();
        }
    }
    for group in 0..g.groups {
        let xg = &x[group * cin_g * h * w..(group + 1) * cin_g * h * w];
        let go = &dout[group * cout_g * n..(group + 1) * cout_g * n];
        let wg = &weight[group * cout_g * taps..(group + 1) * cout_g * taps];
        if let Some(dw) = dw.as_deref_mut() {
            let owned;
            let col: &[f64] = if is_identity_patch(g) {
                xg
            } else {
                owned = im2col(xg, h, w, cin_g, g);
                &owned
            };
            let col_t = transpose(col, taps, n);
            matmul_acc(go, cout_g, n, &col_t, taps, &mut dw[group * cout_g * taps..(group + 1) * cout_g * taps]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxg = &mut dx[group * cin_g * h * w..(group + 1) * cin_g * h * w];
            let wt = transpose(wg, cout_g, taps);
            if is_identity_patch(g) {
                matmul_acc(&wt, taps, cout_g, go, n, dxg);
            } else {
                let mut dcol = vec![0.0; taps * n];
                matmul_acc(&wt, taps, cout_g, go, n, &mut dcol);
                col2im(&dcol, h, w, cin_g, g, dxg);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization and pooling

/// Per-position normalization across channels, followed by a per-channel
/// affine transform.
pub fn layer_norm(input: &ImageTensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<ImageTensor> {
    let (c, h, w) = input.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "layer_norm: gamma/beta lengths {}/{} vs {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let (out, _, _) = layer_norm_forward(input.data(), c, h * w, gamma, beta, eps);
    ImageTensor::new(c, h, w, out)
}

/// Returns `(output, normalized input, inverse std per position)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    c: usize,
    n: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut var = vec![0.0; n];
    for ch in 0..c {
        for ((s, v), m) in var.iter_mut().zip(&x[ch * n..(ch + 1) * n]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / c as f64 + eps).sqrt()).collect();
    let mut xhat = vec![0.0; c * n];
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for p in 0..n {
            let i = ch * n + p;
            xhat[i] = (x[i] - mean[p]) * inv_std[p];
            out[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

/// Mean of each channel over all spatial positions.
pub fn global_avg_pool(input: &ImageTensor) -> Vec<f64> {
    let n = input.plane_len() as f64;
    (0..input.channels()).map(|c| input.channel(c).iter().sum::<f64>() / n).collect()
}

// ---------------------------------------------------------------------------
// MLP

/// Two affine layers with an activation in between. Weight matrices are
/// row-major `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
            activation: Activation::Gelu,
        }
    }

    fn check(&self) -> Result<()> {
        if self.w1.len() != self.hidden * self.input
            || self.b1.len() != self.hidden
            || self.w2.len() != self.output * self.hidden
            || self.b2.len() != self.output
        {
            return Err(Error::shape(format!(
                "mlp {}->{}->{} has inconsistent parameter lengths",
                self.input, self.hidden, self.output
            )));
        }
        Ok(())
    }
}

pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn mlp_forward(input: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    mlp.check()?;
    if input.len() != mlp.input {
        return Err(Error::shape(format!(
            "mlp expects input of length {}, got {}",
            mlp.input,
            input.len()
        )));
    }
    let hidden: Vec<f64> = affine(&mlp.w1, &mlp.b1, input).into_iter().map(|v| mlp.activation.apply(v)).collect();
    Ok(affine(&mlp.w2, &mlp.b2, &hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Direct zero-padded convolution straight from the definition.
    fn naive_conv(p: &ConvParams, x: &ImageTensor) -> ImageTensor {
        let g = p.geom;
        let (_, h, w) = x.dims();
        let (oh, ow) = (h / g.stride, w / g.stride);
        let pad = (g.kernel / 2) as isize;
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        ImageTensor::from_fn(g.out_channels, oh, ow, |oc, oy, ox| {
            let mut acc = p.bias[oc];
            for icg in 0..cin_g {
                let ic = oc / cout_g * cin_g + icg;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += p.weights[((oc * cin_g + icg) * g.kernel + ky) * g.kernel + kx]
                                * x.get(ic, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_conv(rng: &mut ChaCha8Rng, kind: ConvKind, cin: usize, cout: usize, k: usize) -> ConvParams {
        let mut p = ConvParams::zeros(kind, cin, cout, k).unwrap();
        p.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 1, 5, 7);
        let p = ConvParams::new(ConvKind::Pointwise, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d(&p, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 2, 6, 6);
        let mut p = ConvParams::zeros(ConvKind::Standard, 2, 1, 3).unwrap();
        p.bias[0] = 0.75;
        let y = conv2d(&p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_param_count_closed_form() {
        let p = ConvParams::zeros(ConvKind::Standard, 3, 64, 3).unwrap();
        assert_eq!(p.param_count(), 1792);
    }

    #[test]
    fn conv_matches_naive_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (ConvKind::Standard, 3, 4, 3),
            (ConvKind::Standard, 2, 2, 5),
            (ConvKind::Pointwise, 3, 5, 1),
            (ConvKind::Depthwise, 4, 4, 3),
            (ConvKind::StridedDown, 2, 4, 3),
        ];
        for (kind, cin, cout, k) in cases {
            let p = random_conv(&mut rng, kind, cin, cout, k);
            let x = random_image(&mut rng, cin, 8, 6);
            let fast = conv2d(&p, &x).unwrap();
            let slow = naive_conv(&p, &x);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = ImageTensor::zeros(3, 5, 5);
        let p = ConvParams::zeros(ConvKind::Standard, 2, 2, 3).unwrap();
        assert!(matches!(conv2d(&p, &x), Err(Error::Shape(_))));
        let p = ConvParams::zeros(ConvKind::StridedDown, 3, 3, 3).unwrap();
        assert!(matches!(conv2d(&p, &x), Err(Error::Shape(_))));
        assert!(ConvParams::zeros(ConvKind::Standard, 3, 3, 4).is_err());
        assert!(ConvParams::zeros(ConvKind::Depthwise, 3, 4, 3).is_err());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_conv(&mut rng, ConvKind::Standard, 3, 2, 3);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = random_image(&mut rng, 3, 8, 8);
        let y = random_image(&mut rng, 3, 8, 8);
        let (a, b) = (1.7, -0.3);
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = conv2d(&p, &mix).unwrap();
        let rhs = conv2d(&p, &x)
            .unwrap()
            .zip_map(&conv2d(&p, &y).unwrap(), |u, v| a * u + b * v)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = ImageTensor::filled(4, 3, 3, 2.5);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = ImageTensor::new(2, 1, 1, vec![-1.0, 1.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 4, 8, 8);
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        for yy in 0..8 {
            for xx in 0..8 {
                let m: f64 = (0..4).map(|c| y.get(c, yy, xx)).sum::<f64>() / 4.0;
                assert!(m.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let x = ImageTensor::zeros(3, 2, 2);
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-6).is_err());
    }

    #[test]
    fn pooling() {
        assert_eq!(global_avg_pool(&ImageTensor::filled(2, 3, 3, 5.0)), vec![5.0, 5.0]);
        let x = ImageTensor::new(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x), vec![1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 3, 7, 9);
        let pooled = global_avg_pool(&x);
        for c in 0..3 {
            let mut sum = 0.0;
            for y in 0..7 {
                for xx in 0..9 {
                    sum += x.get(c, y, xx);
                }
            }
            assert!((pooled[c] - sum / 63.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_examples() {
        let mut id = Mlp::zeros(3, 3, 3);
        id.activation = Activation::Relu;
        for i in 0..3 {
            id.w1[i * 3 + i] = 1.0;
            id.w2[i * 3 + i] = 1.0;
        }
        assert_eq!(mlp_forward(&[0.5, 0.0, 2.0], &id).unwrap(), vec![0.5, 0.0, 2.0]);

        let mut z = Mlp::zeros(4, 2, 3);
        z.b2 = vec![1.0, -2.0, 3.0];
        assert_eq!(mlp_forward(&[1.0, 2.0, 3.0, 4.0], &z).unwrap(), vec![1.0, -2.0, 3.0]);

        assert!(mlp_forward(&[1.0, 2.0], &z).is_err());
    }

    #[test]
    fn mlp_matches_matrix_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = Mlp::zeros(8, 4, 8);
        for v in m.w1.iter_mut().chain(&mut m.b1).chain(&mut m.w2).chain(&mut m.b2) {
            *v = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = [0.0; 4];
        for (i, hv) in h.iter_mut().enumerate() {
            let mut s = m.b1[i];
            for j in 0..8 {
                s += m.w1[i * 8 + j] * x[j];
            }
            *hv = 0.5 * s * (1.0 + libm::erf(s / 2f64.sqrt()));
        }
        let y = mlp_forward(&x, &m).unwrap();
        for i in 0..8 {
            let mut s = m.b2[i];
            for j in 0..4 {
                s += m.w2[i * 4 + j] * h[j];
            }
            assert!((y[i] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let s = softmax(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let s = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in s.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_shape_and_gradient() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(30.0) - 30.0).abs() < 1e-12);
        assert!(gelu(-30.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-4.0..4.0);
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = gelu_grad(x);
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-6, "x={x}: {fd} vs {an}");
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                logits in prop::collection::vec(-50.0f64..50.0, 1..16),
                shift in -100.0f64..100.0,
            ) {
                let a = softmax(&logits);
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let b = softmax(&shifted);
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }

            #[test]
            fn layer_norm_ignores_channel_shift(
                vals in prop::collection::vec(-5.0f64..5.0, 3 * 4 * 4),
                shifts in prop::collection::vec(-10.0f64..10.0, 16),
            ) {
                let x = ImageTensor::new(3, 4, 4, vals).unwrap();
                let mut y = x.clone();
                for c in 0..3 {
                    for (v, s) in y.channel_mut(c).iter_mut().zip(&shifts) {
                        *v += s;
                    }
                }
                let a = layer_norm(&x, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
                let b = layer_norm(&y, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
                prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
            }
        }
    }
}
