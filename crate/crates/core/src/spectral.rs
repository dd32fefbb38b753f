//! 2D discrete Fourier transforms and frequency-domain filtering.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[u,v] = Σ x[y,x]·exp(−2πi(uy/H + vx/W))`, and the inverse carries the
//! `1/(H·W)` factor. Spectra are stored in full (not half-spectrum) with DC at
//! index `(0, 0)`.
//!
//! Power-of-two axes use an iterative radix-2 FFT; other lengths fall back to
//! a direct O(N²) transform along that axis.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Complex `channels × height × width` spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl SpectrumTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "spectrum data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![Complex64::new(0.0, 0.0); channels * height * width] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
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

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: Complex64) {
        self.data[(c * self.height + u) * self.width + v] = value;
    }

    pub fn max_abs_diff(&self, other: &SpectrumTensor) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }
}

/// Real per-bin gains, either shared across channels (`channels == 1`) or
/// one map per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterTensor {
    channels: usize,
    height: usize,
    width: usize,
    gains: Vec<f64>,
}

impl FilterTensor {
    pub fn new(channels: usize, height: usize, width: usize, gains: Vec<f64>) -> Result<Self> {
        if gains.len() != channels * height * width {
            return Err(Error::shape(format!(
                "filter gains length {} does not match {channels}x{height}x{width}",
                gains.len()
            )));
        }
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("filter gain".into()));
        }
        Ok(Self { channels, height, width, gains })
    }

    pub fn constant(height: usize, width: usize, gain: f64) -> Self {
        Self { channels: 1, height, width, gains: vec![gain; height * width] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Gains of channel `c` (channel 0 for a shared filter).
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        let c = if self.channels == 1 { 0 } else { c };
        &self.gains[c * n..(c + 1) * n]
    }

    /// The bit-complement of a binary mask: `1 − g` per bin.
    pub fn complement(&self) -> FilterTensor {
        FilterTensor { gains: self.gains.iter().map(|g| 1.0 - g).collect(), ..self.clone() }
    }
}

// ---------------------------------------------------------------------------
// 1D transforms

fn twiddles(n: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n / 2.max(1))
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

fn fft_radix2(buf: &mut [Complex64], tw: &[Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let t = tw[k * step] * buf[start + k + half];
                let u = buf[start + k];
                buf[start + k] = u + t;
                buf[start + k + half] = u - t;
            }
        }
        len <<= 1;
    }
}

fn dft_direct(buf: &mut [Complex64], inverse: bool, scratch: &mut Vec<Complex64>) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    scratch.clear();
    scratch.extend_from_slice(buf);
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, x) in scratch.iter().enumerate() {
            // Reduce the phase index mod n to keep the angle small.
            let phase = ((k * j) % n) as f64 / n as f64;
            acc += x * Complex64::from_polar(1.0, sign * 2.0 * PI * phase);
        }
        *out = acc;
    }
}

/// Which algorithm to use along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DftMethod {
    /// Radix-2 FFT on power-of-two axes, direct transform elsewhere.
    Auto,
    /// Direct O(N²) transform on every axis.
    Direct,
}

struct Axis {
    n: usize,
    inverse: bool,
    tw: Option<Vec<Complex64>>,
}

impl Axis {
    fn new(n: usize, inverse: bool, method: DftMethod) -> Self {
        let tw = (method == DftMethod::Auto && n.is_power_of_two()).then(|| twiddles(n, inverse));
        Self { n, inverse, tw }
    }

    fn run(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.tw {
            Some(tw) => fft_radix2(buf, tw),
            None => dft_direct(buf, self.inverse, scratch),
        }
    }
}

/// In-place unnormalized 2D transform of `channels` consecutive `h × w`
/// planes. The inverse direction does NOT apply the `1/(h·w)` factor.
pub(crate) fn transform_planes(data: &mut [Complex64], h: usize, w: usize, inverse: bool, method: DftMethod) {
    let rows = Axis::new(w, inverse, method);
    let cols = Axis::new(h, inverse, method);
    let mut scratch = Vec::new();
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for plane in data.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            rows.run(row, &mut scratch);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            cols.run(&mut column, &mut scratch);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

pub(crate) fn forward_real(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_planes(&mut data, h, w, false, DftMethod::Auto);
    data
}

/// Real part of the normalized inverse transform. Also returns the largest
/// discarded imaginary magnitude.
pub(crate) fn inverse_real(spec: &[Complex64], h: usize, w: usize) -> (Vec<f64>, f64) {
    let mut data = spec.to_vec();
    transform_planes(&mut data, h, w, true, DftMethod::Auto);
    let scale = 1.0 / (h * w) as f64;
    let residual = data.iter().map(|z| (z.im * scale).abs()).fold(0.0, f64::max);
    (data.iter().map(|z| z.re * scale).collect(), residual)
}

// ---------------------------------------------------------------------------
// Public operations

/// Forward 2D DFT of each channel.
pub fn dft2d(input: &ImageTensor) -> SpectrumTensor {
    dft2d_with(input, DftMethod::Auto)
}

pub fn dft2d_with(input: &ImageTensor, method: DftMethod) -> SpectrumTensor {
    let (c, h, w) = input.dims();
    let mut data: Vec<Complex64> = input.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_planes(&mut data, h, w, false, method);
    SpectrumTensor { channels: c, height: h, width: w, data }
}

/// Complex-to-complex forward transform.
pub fn dft2d_complex(input: &SpectrumTensor) -> SpectrumTensor {
    let mut out = input.clone();
    transform_planes(&mut out.data, out.height, out.width, false, DftMethod::Auto);
    out
}

/// Inverse 2D DFT, returning the real part.
pub fn idft2d(input: &SpectrumTensor) -> ImageTensor {
    idft2d_with_residual(input).0
}

/// Inverse 2D DFT, returning the real part and the largest magnitude of the
/// discarded imaginary part (zero, up to rounding, for Hermitian spectra).
pub fn idft2d_with_residual(input: &SpectrumTensor) -> (ImageTensor, f64) {
    let (c, h, w) = input.dims();
    let (re, residual) = inverse_real(&input.data, h, w);
    (ImageTensor::new(c, h, w, re).expect("dims preserved"), residual)
}

/// Per-bin product of a spectrum with real gains.
pub fn apply_filter(spec: &SpectrumTensor, filt: &FilterTensor) -> Result<SpectrumTensor> {
    let (c, h, w) = spec.dims();
    if filt.height != h || filt.width != w || (filt.channels != 1 && filt.channels != c) {
        return Err(Error::shape(format!(
            "filter {:?} does not fit spectrum {:?}",
            filt.dims(),
            spec.dims()
        )));
    }
    let n = h * w;
    let mut out = spec.clone();
    for ch in 0..c {
        for (z, g) in out.data[ch * n..(ch + 1) * n].iter_mut().zip(filt.channel(ch)) {
            *z *= g;
        }
    }
    Ok(out)
}

/// Signed centered frequency of bin `u` on an axis of length `n`.
#[inline]
fn centered(u: usize, n: usize) -> f64 {
    if 2 * u < n {
        u as f64
    } else {
        u as f64 - n as f64
    }
}

/// Normalized radial frequency of bin `(u, v)`, in `[0, 1]`:
/// `sqrt((u'/(H/2))² + (v'/(W/2))²) / √2`.
pub fn radial_frequency(height: usize, width: usize, u: usize, v: usize) -> f64 {
    let fu = centered(u, height) / (height as f64 / 2.0);
    let fv = centered(v, width) / (width as f64 / 2.0);
    ((fu * fu + fv * fv) / 2.0).sqrt()
}

/// Ideal high-pass mask: gain 0 where the radial frequency is `≤ cutoff`,
/// 1 elsewhere. DC is therefore always blocked.
pub fn ideal_high_pass(height: usize, width: usize, cutoff: f64) -> Result<FilterTensor> {
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(Error::invalid(format!("cutoff {cutoff} outside [0, 1]")));
    }
    let mut gains = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            gains.push(if radial_frequency(height, width, u, v) <= cutoff { 0.0 } else { 1.0 });
        }
    }
    FilterTensor::new(1, height, width, gains)
}

/// Complement of [`ideal_high_pass`].
pub fn ideal_low_pass(height: usize, width: usize, cutoff: f64) -> Result<FilterTensor> {
    Ok(ideal_high_pass(height, width, cutoff)?.complement())
}
