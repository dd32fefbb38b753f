//! Degradation models and seeded synthetic scenes.
//!
//! Every random draw comes from [`keyed_rng`], so a triple depends only on
//! its own seed and not on generation order.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::spectral::{radial_frequency, transform_planes, DftMethod};
use crate::tensor::ImageTensor;

pub const MIN_LEVEL: f64 = 1.0;
pub const MAX_LEVEL: f64 = 16.0;

const OP_SCENE: u64 = 1;
const OP_NIR: u64 = 2;
const OP_DARKEN: u64 = 3;
const OP_NOISE: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes three keys into one 64-bit seed.
pub fn derive_seed(seed: u64, image_id: u64, op_id: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ image_id) ^ op_id)
}

pub fn keyed_rng(seed: u64, image_id: u64, op_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, image_id, op_id))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// Poisson shot noise plus Gaussian read noise.
    MixedGp,
    /// Additive Gaussian noise.
    Gaussian,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed-gp" => Ok(NoiseKind::MixedGp),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::Config(format!("unknown noise kind {other:?} (expected mixed-gp or gaussian)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Gaussian standard deviation in 8-bit units.
    pub sigma: f64,
    /// Mixed-noise level in `[1, 16]`.
    pub level: f64,
    pub darken: bool,
    pub darken_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { kind: NoiseKind::MixedGp, sigma: 25.0, level: 8.0, darken: false, darken_range: (0.1, 1.0), seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        check_level(self.level)?;
        let (lo, hi) = self.darken_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("darken range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        Ok(())
    }

    /// Degrades `clean`. `image_id` keys the random streams.
    pub fn apply(&self, clean: &ImageTensor, image_id: u64) -> Result<ImageTensor> {
        self.validate()?;
        let mut img = clean.clone();
        if self.darken {
            img = darken(&img, self.darken_range, &mut keyed_rng(self.seed, image_id, OP_DARKEN))?;
        }
        let mut rng = keyed_rng(self.seed, image_id, OP_NOISE);
        match self.kind {
            NoiseKind::MixedGp => mixed_noise(&img, self.level, &mut rng),
            NoiseKind::Gaussian => gaussian_noise(&img, self.sigma, &mut rng),
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        return Err(Error::invalid(format!("noise level {level} outside [{MIN_LEVEL}, {MAX_LEVEL}]")));
    }
    Ok(())
}

/// Shot-noise scale (photons per unit intensity) and read-noise std.
pub fn mixed_params(level: f64) -> (f64, f64) {
    (3000.0 / level, level / 255.0)
}

/// Scales every pixel by one factor drawn from `range`.
pub fn darken(image: &ImageTensor, range: (f64, f64), rng: &mut impl Rng) -> Result<ImageTensor> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!("darken range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
    }
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    Ok(image.map(|v| (v * scale).clamp(0.0, 1.0)))
}

pub fn mixed_noise(image: &ImageTensor, level: f64, rng: &mut impl Rng) -> Result<ImageTensor> {
    check_level(level)?;
    let (s, sigma_g) = mixed_params(level);
    let read = Normal::new(0.0, sigma_g).map_err(|e| Error::invalid(e.to_string()))?;
    let data = image
        .data()
        .iter()
        .map(|&x| {
            let lambda = x.max(0.0) * s;
            let shot = if lambda > 0.0 {
                Poisson::new(lambda).map_err(|e| Error::invalid(e.to_string()))?.sample(rng) / s
            } else {
                0.0
            };
            Ok((shot + read.sample(rng)).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let (c, h, w) = image.dims();
    ImageTensor::new(c, h, w, data)
}

pub fn gaussian_noise(image: &ImageTensor, sigma: f64, rng: &mut impl Rng) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let std = sigma / 255.0;
    let data = image
        .data()
        .iter()
        .map(|x| {
            let n: f64 = rng.sample(StandardNormal);
            (x + std * n).clamp(0.0, 1.0)
        })
        .collect();
    let (c, h, w) = image.dims();
    ImageTensor::new(c, h, w, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTriple {
    pub clean: ImageTensor,
    pub nir: ImageTensor,
    pub noisy: ImageTensor,
    pub seed: u64,
}

/// Zero-mean, unit-std random field with a Gaussian power falloff of width
/// `r0` in normalized radial frequency.
fn smooth_field(h: usize, w: usize, r0: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let r = radial_frequency(h, w, u, v);
            let a = (-(r / r0).powi(2) / 2.0).exp();
            let (re, im): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            spec[u * w + v] = Complex64::new(re, im) * a;
        }
    }
    transform_planes(&mut spec, h, w, true, DftMethod::Auto);
    let mut f: Vec<f64> = spec.iter().map(|z| z.re).collect();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / std.max(1e-12));
    f
}

/// Shared structure: overlapping rectangles and disks plus grating patches.
fn detail_map(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut d = vec![0.0; h * w];
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..24 {
        let amp = rng.random_range(0.1..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let (ry, rx) = (rng.random_range(0.05..0.25) * hf, rng.random_range(0.05..0.25) * wf);
        let disk = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disk { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    d[y * w + x] += amp;
                }
            }
        }
    }
    for _ in 0..3 {
        let amp = rng.random_range(0.04..0.1);
        let period = rng.random_range(2.5..8.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
        let (ph, pw) = (rng.random_range(h / 8..h / 2), rng.random_range(w / 8..w / 2));
        let (s, c) = theta.sin_cos();
        for y in y0..(y0 + ph).min(h) {
            for x in x0..(x0 + pw).min(w) {
                let t = (y as f64 * s + x as f64 * c) / period;
                d[y * w + x] += amp * (2.0 * std::f64::consts::PI * t).sin();
            }
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    d
}

/// Generates a clean RGB scene, an NIR view sharing its edges and textures
/// with independent low-frequency intensity, and a degraded RGB view.
pub fn synth_triple(seed: u64, height: usize, width: usize, spec: &NoiseSpec) -> Result<SceneTriple> {
    for d in [height, width] {
        if d < 32 || !d.is_power_of_two() {
            return Err(Error::invalid(format!("scene dims must be powers of two >= 32, got {height}x{width}")));
        }
    }
    let (h, w) = (height, width);
    let mut rng = keyed_rng(seed, 0, OP_SCENE);
    let detail = detail_map(h, w, &mut rng);
    let luma = smooth_field(h, w, 0.08, &mut rng);
    let mut clean = ImageTensor::zeros(3, h, w);
    for c in 0..3 {
        let chroma = smooth_field(h, w, 0.05, &mut rng);
        let base = rng.random_range(0.35..0.65);
        let gain = rng.random_range(0.8..1.2);
        for (i, v) in clean.channel_mut(c).iter_mut().enumerate() {
            *v = (base + 0.1 * luma[i] + 0.05 * chroma[i] + gain * detail[i]).clamp(0.0, 1.0);
        }
    }

    let mut nrng = keyed_rng(seed, 0, OP_NIR);
    let field = smooth_field(h, w, 0.08, &mut nrng);
    let base = nrng.random_range(0.35..0.65);
    let gain = nrng.random_range(0.8..1.2);
    let nir_data = (0..h * w).map(|i| (base + 0.12 * field[i] + gain * detail[i]).clamp(0.0, 1.0)).collect();
    let nir = ImageTensor::new(1, h, w, nir_data)?;

    let noisy = spec.apply(&clean, seed)?;
    Ok(SceneTriple { clean, nir, noisy, seed })
}

/// `count` triples whose seeds are derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, height: usize, width: usize, spec: &NoiseSpec) -> Result<Vec<SceneTriple>> {
    (0..count as u64).map(|i| synth_triple(derive_seed(seed, i, 0), height, width, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(samples: &[f64]) -> f64 {
        let m = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64
    }

    fn pixel_variance(level: f64, n: u64) -> f64 {
        let img = ImageTensor::filled(1, 1, 1, 0.5);
        let s: Vec<f64> = (0..n)
            .map(|i| mixed_noise(&img, level, &mut keyed_rng(9, i, 0)).unwrap().data()[0])
            .collect();
        variance(&s)
    }

    #[test]
    fn darken_identity_and_half() {
        let img = ImageTensor::from_fn(3, 4, 4, |c, y, x| (c + y + x) as f64 / 10.0);
        let mut rng = keyed_rng(1, 0, 0);
        assert_eq!(darken(&img, (1.0, 1.0), &mut rng).unwrap(), img);
        let half = darken(&img, (0.5, 0.5), &mut rng).unwrap();
        assert!(half.data().iter().zip(img.data()).all(|(h, v)| *h == v * 0.5));
    }

    #[test]
    fn darken_replays() {
        let img = ImageTensor::filled(1, 4, 4, 0.8);
        let a = darken(&img, (0.1, 1.0), &mut keyed_rng(3, 1, 2)).unwrap();
        let b = darken(&img, (0.1, 1.0), &mut keyed_rng(3, 1, 2)).unwrap();
        assert_eq!(a, b);
        assert!(darken(&img, (0.0, 1.0), &mut keyed_rng(3, 1, 2)).is_err());
    }

    #[test]
    fn mixed_noise_grows_with_level() {
        let v1 = pixel_variance(1.0, 100);
        let v16 = pixel_variance(16.0, 100);
        assert!(v16 / v1 > 2.0, "{v1} vs {v16}");
        let (a, b, c) = (pixel_variance(1.0, 1000), pixel_variance(8.0, 1000), pixel_variance(16.0, 1000));
        assert!(a < b && b < c);
    }

    #[test]
    fn mixed_noise_zero_signal_is_read_noise() {
        let img = ImageTensor::zeros(1, 32, 32);
        let out = mixed_noise(&img, 16.0, &mut keyed_rng(2, 0, 0)).unwrap();
        let mut rng = keyed_rng(2, 0, 0);
        let read = Normal::new(0.0f64, 16.0 / 255.0).unwrap();
        for v in out.data() {
            assert_eq!(*v, read.sample(&mut rng).clamp(0.0, 1.0));
        }
    }

    #[test]
    fn mixed_noise_checks_level_and_replays() {
        let img = ImageTensor::filled(3, 8, 8, 0.4);
        assert!(mixed_noise(&img, 0.5, &mut keyed_rng(0, 0, 0)).is_err());
        assert!(mixed_noise(&img, 17.0, &mut keyed_rng(0, 0, 0)).is_err());
        let a = mixed_noise(&img, 4.0, &mut keyed_rng(5, 0, 0)).unwrap();
        let b = mixed_noise(&img, 4.0, &mut keyed_rng(5, 0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = ImageTensor::filled(1, 64, 64, 0.5);
        assert_eq!(gaussian_noise(&img, 0.0, &mut keyed_rng(0, 0, 0)).unwrap(), img);
        let out = gaussian_noise(&img, 25.0, &mut keyed_rng(4, 0, 0)).unwrap();
        let std = variance(out.data()).sqrt();
        assert!((std - 25.0 / 255.0).abs() < 0.15 * 25.0 / 255.0, "std {std}");
        assert_eq!(out, gaussian_noise(&img, 25.0, &mut keyed_rng(4, 0, 0)).unwrap());
        assert!(gaussian_noise(&img, -1.0, &mut keyed_rng(0, 0, 0)).is_err());
    }

    #[test]
    fn triples_replay_and_stay_in_range() {
        let spec = NoiseSpec { darken: true, ..NoiseSpec::default() };
        let a = synth_triple(11, 32, 64, &spec).unwrap();
        let b = synth_triple(11, 32, 64, &spec).unwrap();
        assert_eq!(a, b);
        for img in [&a.clean, &a.nir, &a.noisy] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a.nir.dims(), (1, 32, 64));
        assert_eq!(a.noisy.dims(), (3, 32, 64));
        assert_ne!(a.clean, synth_triple(12, 32, 64, &spec).unwrap().clean);
    }

    #[test]
    fn noiseless_spec_keeps_clean() {
        let spec = NoiseSpec { kind: NoiseKind::Gaussian, sigma: 0.0, ..NoiseSpec::default() };
        let t = synth_triple(3, 32, 32, &spec).unwrap();
        assert_eq!(t.noisy, t.clean);
    }

    #[test]
    fn triple_rejects_bad_dims() {
        assert!(synth_triple(0, 16, 32, &NoiseSpec::default()).is_err());
        assert!(synth_triple(0, 48, 32, &NoiseSpec::default()).is_err());
    }

    #[test]
    fn dataset_is_order_independent() {
        let spec = NoiseSpec::default();
        let all = synth_dataset(4, 3, 32, 32, &spec).unwrap();
        let third = synth_triple(derive_seed(4, 2, 0), 32, 32, &spec).unwrap();
        assert_eq!(all[2], third);
    }

    #[test]
    fn noise_kind_parses() {
        assert_eq!("mixed-gp".parse::<NoiseKind>().unwrap(), NoiseKind::MixedGp);
        assert_eq!("gaussian".parse::<NoiseKind>().unwrap(), NoiseKind::Gaussian);
        assert!("speckle".parse::<NoiseKind>().is_err());
    }
}
