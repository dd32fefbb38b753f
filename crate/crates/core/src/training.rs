//! Loss, optimizer, learning-rate schedule and the training loop.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::psnr;
use crate::network::{denoise_image, fcenet_graph, ModelConfig, ModelWeights};
use crate::noise::{keyed_rng, SceneTriple};
use crate::params::ParamStore;
use crate::spectral::{dft2d, SpectrumTensor};
use crate::tensor::{charbonnier_excess, ImageTensor, Tensor};

const OP_BATCH: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub charbonnier_eps: f64,
    /// Weight of the spectral term.
    pub freq_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { charbonnier_eps: 1e-3, freq_weight: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.charbonnier_eps > 0.0 && self.charbonnier_eps.is_finite()) {
            return Err(Error::Config(format!("loss.eps must be positive, got {}", self.charbonnier_eps)));
        }
        if !(self.freq_weight >= 0.0 && self.freq_weight.is_finite()) {
            return Err(Error::Config(format!("loss.freq_weight must be >= 0, got {}", self.freq_weight)));
        }
        Ok(())
    }
}

/// Mean of `sqrt((x − t)² + eps²)`.
pub fn charbonnier(x: &ImageTensor, t: &ImageTensor, eps: f64) -> Result<f64> {
    x.check_same_shape(t)?;
    let sum: f64 = x.data().iter().zip(t.data()).map(|(a, b)| charbonnier_excess(a - b, eps)).sum();
    Ok(eps + sum / x.data().len() as f64)
}

/// Charbonnier on the real and imaginary parts of `scale · (a − b)`, averaged
/// over both parts of every bin.
pub fn charbonnier_complex(a: &SpectrumTensor, b: &SpectrumTensor, eps: f64, scale: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("spectra {:?} and {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| {
            let d = (p - q) * scale;
            charbonnier_excess(d.re, eps) + charbonnier_excess(d.im, eps)
        })
        .sum();
    Ok(eps + sum / (2 * a.data().len()) as f64)
}

fn spectrum_scale(img: &ImageTensor) -> f64 {
    1.0 / ((img.height() * img.width()) as f64).sqrt()
}

/// Spatial Charbonnier on both stages plus the weighted spectral term on
/// the final output. Spectra are divided by `sqrt(H·W)`.
pub fn total_loss(x1: &ImageTensor, x2: &ImageTensor, t: &ImageTensor, cfg: &LossConfig) -> Result<f64> {
    x1.check_same_shape(t)?;
    x2.check_same_shape(t)?;
    let eps = cfg.charbonnier_eps;
    let spectral = charbonnier_complex(&dft2d(x2), &dft2d(t), eps, spectrum_scale(t))?;
    Ok(charbonnier(x1, t, eps)? + charbonnier(x2, t, eps)? + cfg.freq_weight * spectral)
}

/// [`total_loss`] recorded on the tape.
pub fn loss_graph(g: &mut Graph, x1: Var, x2: Var, t: &ImageTensor, cfg: &LossConfig) -> Result<Var> {
    let eps = cfg.charbonnier_eps;
    let a = g.tape.charbonnier(x1, t.data(), eps)?;
    let b = g.tape.charbonnier(x2, t.data(), eps)?;
    let z = g.tape.fft(x2)?;
    let target = dft2d(t);
    let s = g.tape.spectral_charbonnier(z, target.data(), eps, spectrum_scale(t))?;
    let s = g.tape.scale(s, cfg.freq_weight);
    let ab = g.tape.add(a, b)?;
    g.tape.add(ab, s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub steps: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_min: 1e-6,
            steps: 500,
            batch: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            log_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!("need 0 <= lr_min <= lr_init and lr_init > 0, got {} and {}", self.lr_min, self.lr_init));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.batch == 0 || self.log_every == 0 {
            return bad("optim.batch and the log interval must be >= 1".into());
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("adam epsilon must be positive and the clip norm non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        Self {
            step: 0,
            lr_init: cfg.lr_init,
            lr_min: cfg.lr_min,
            total_steps: cfg.steps as u64,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            adam_eps: cfg.adam_eps,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, state: &OptimState) -> Result<f64> {
    if step > state.total_steps {
        return Err(Error::invalid(format!("step {step} is beyond the {}-step schedule", state.total_steps)));
    }
    if state.total_steps == 0 {
        return Ok(state.lr_init);
    }
    let t = step as f64 / state.total_steps as f64;
    Ok(state.lr_min + 0.5 * (state.lr_init - state.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn check_grads(store: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape != store.get(id).shape {
            return Err(Error::shape(format!("gradient of {} has shape {:?}", store.name(id), g.shape)));
        }
        if let Some(v) = g.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} contains {v}", store.name(id))));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    check_grads(store, grads)?;
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if state.m.len() != store.len() {
        return Err(Error::shape("optimizer moments do not match the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let (mh, vh) = (m.data[i] / c1, v.data[i] / c2);
            p.data[i] -= lr * mh / (vh.sqrt() + state.adam_eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| &g.data).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| &mut g.data).for_each(|v| *v *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

/// One metrics row. `loss` is the mean batch loss since the previous row;
/// `psnr` is measured on the evaluation pair after the step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,psnr";

pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.step, r.lr, r.loss, r.psnr));
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::invalid("metrics csv header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("metrics row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LogRow { step: f[0].parse().map_err(|_| bad())?, lr: num(f[1])?, loss: num(f[2])?, psnr: num(f[3])? })
        })
        .collect()
}

pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub optim: OptimState,
    pub log: Vec<LogRow>,
    /// Set when training stopped early on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// PSNR of the clamped restoration of `pair` against its clean image.
pub fn restoration_psnr(weights: &ModelWeights, pair: &SceneTriple) -> Result<f64> {
    let out = denoise_image(weights, &pair.noisy, &pair.nir)?.clamp01();
    psnr(&out, &pair.clean, 1.0)
}

fn check_dataset(dataset: &[SceneTriple], patch: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (i, t) in dataset.iter().enumerate() {
        let (c, h, w) = t.clean.dims();
        if c != 3 || t.noisy.dims() != (c, h, w) || t.nir.dims() != (1, h, w) {
            return Err(Error::shape(format!("triple {i}: inconsistent shapes")));
        }
        if h < patch || w < patch {
            return Err(Error::shape(format!("triple {i} is {h}x{w}, smaller than the {patch}px patch")));
        }
    }
    Ok(())
}

struct Crop {
    noisy: ImageTensor,
    nir: ImageTensor,
    clean: ImageTensor,
}

fn random_crop(t: &SceneTriple, patch: usize, rng: &mut impl Rng) -> Result<Crop> {
    let (_, h, w) = t.clean.dims();
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    Ok(Crop {
        noisy: t.noisy.crop(y0, x0, patch, patch)?,
        nir: t.nir.crop(y0, x0, patch, patch)?,
        clean: t.clean.crop(y0, x0, patch, patch)?,
    })
}

/// Loss and parameter gradients for one crop.
fn sample_gradients(weights: &ModelWeights, crop: &Crop, loss: &LossConfig) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(&weights.store, true);
    let (n, r) = (g.input(&crop.noisy), g.input(&crop.nir));
    let (x1, x2) = fcenet_graph(&mut g, &weights.layout, n, r)?;
    let l = loss_graph(&mut g, x1, x2, &crop.clean, loss)?;
    let value = g.tape.scalar(l);
    let grads = g.tape.backward(l)?;
    Ok((value, g.param_grads(&grads)))
}

/// Trains from a seeded initialization. Batches are random crops drawn
/// from a seeded shuffle of `dataset`; `eval` supplies the logged PSNR.
/// Runs single-threaded, so equal inputs give bit-identical results.
pub fn train_loop(
    dataset: &[SceneTriple],
    eval: &SceneTriple,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.optim.validate()?;
    check_dataset(dataset, cfg.model.patch)?;
    check_dataset(std::slice::from_ref(eval), cfg.model.patch)?;

    let mut weights = ModelWeights::init(cfg.model, cfg.seed)?;
    let mut state = OptimState::new(&cfg.optim, &weights.store);
    let mut rng = keyed_rng(cfg.seed, 0, OP_BATCH);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let (mut window, mut window_n) = (0.0, 0usize);
    let steps = cfg.optim.steps;
    let batch = cfg.optim.batch;

    for step in 0..steps {
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for _ in 0..batch {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().unwrap();
            let crop = random_crop(&dataset[idx], cfg.model.patch, &mut rng)?;
            let (l, g) = sample_gradients(&weights, &crop, &cfg.loss)?;
            loss += l / batch as f64;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.unwrap();
        grads.iter_mut().flat_map(|g| &mut g.data).for_each(|v| *v /= batch as f64);
        if !loss.is_finite() {
            let aborted = Some(format!("non-finite loss {loss} at step {}", step + 1));
            return Ok(TrainOutcome { weights, optim: state, log, aborted });
        }
        if grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
            let aborted = Some(format!("non-finite gradient at step {}", step + 1));
            return Ok(TrainOutcome { weights, optim: state, log, aborted });
        }
        clip_global_norm(&mut grads, cfg.optim.clip_norm);
        let lr = cosine_lr(state.step, &state)?;
        adam_step(&mut weights.store, &grads, &mut state, lr)?;
        window += loss;
        window_n += 1;

        let done = step + 1;
        if done == 1 || done % cfg.optim.log_every == 0 || done == steps {
            let row = LogRow { step: done, lr, loss: window / window_n as f64, psnr: restoration_psnr(&weights, eval)? };
            on_row(&row);
            log.push(row);
            (window, window_n) = (0.0, 0);
        }
    }
    Ok(TrainOutcome { weights, optim: state, log, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::noise::{synth_dataset, NoiseSpec};
    use crate::params::ParamId;
    use crate::spectral::{dft2d_with, DftMethod};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn charbonnier_examples() {
        let x = random_image(1, 3, 4, 4);
        assert_eq!(charbonnier(&x, &x, 1e-3).unwrap(), 1e-3);
        let a = ImageTensor::new(1, 1, 1, vec![3.0]).unwrap();
        let b = ImageTensor::zeros(1, 1, 1);
        assert_eq!(charbonnier(&a, &b, 4.0).unwrap(), 5.0);
        assert!(charbonnier(&a, &x, 1.0).is_err());
    }

    #[test]
    fn charbonnier_matches_elementwise() {
        let (x, t) = (random_image(2, 3, 8, 8), random_image(3, 3, 8, 8));
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let d = x.get(c, y, xx) - t.get(c, y, xx);
                    sum += (d * d + 1e-6).sqrt();
                }
            }
        }
        assert!((charbonnier(&x, &t, 1e-3).unwrap() - sum / 192.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_floor_and_terms() {
        let t = random_image(4, 3, 8, 8);
        let cfg = LossConfig::default();
        let floor = total_loss(&t, &t, &t, &cfg).unwrap();
        assert!((floor - 2.1e-3).abs() < 1e-15);
        let (x1, x2) = (random_image(5, 3, 8, 8), random_image(6, 3, 8, 8));
        let zero = LossConfig { freq_weight: 0.0, ..cfg };
        let spatial = charbonnier(&x1, &t, 1e-3).unwrap() + charbonnier(&x2, &t, 1e-3).unwrap();
        assert_eq!(total_loss(&x1, &x2, &t, &zero).unwrap(), spatial);
    }

    #[test]
    fn total_loss_matches_term_oracle() {
        let (x1, x2, t) = (random_image(7, 3, 8, 8), random_image(8, 3, 8, 8), random_image(9, 3, 8, 8));
        let eps: f64 = 1e-3;
        let term = |d: f64| (d * d + eps * eps).sqrt();
        let spatial = |x: &ImageTensor| x.data().iter().zip(t.data()).map(|(a, b)| term(a - b)).sum::<f64>() / 192.0;
        let (fx, ft) = (dft2d_with(&x2, DftMethod::Direct), dft2d_with(&t, DftMethod::Direct));
        let mut spec = 0.0;
        for (a, b) in fx.data().iter().zip(ft.data()) {
            let d: Complex64 = (a - b) / 8.0;
            spec += term(d.re) + term(d.im);
        }
        let oracle = spatial(&x1) + spatial(&x2) + 0.1 * spec / 384.0;
        let got = total_loss(&x1, &x2, &t, &LossConfig::default()).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_graph_matches_pure_loss() {
        let (x1, x2, t) = (random_image(10, 3, 8, 8), random_image(11, 3, 8, 8), random_image(12, 3, 8, 8));
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let (a, b) = (g.input(&x1), g.input(&x2));
        let l = loss_graph(&mut g, a, b, &t, &LossConfig::default()).unwrap();
        let pure = total_loss(&x1, &x2, &t, &LossConfig::default()).unwrap();
        assert!((g.tape.scalar(l) - pure).abs() < 1e-14);
    }

    #[test]
    fn loss_graph_gradients() {
        let mut store = ParamStore::new();
        let x1 = store.add("x1", random_image(13, 3, 8, 8).to_tensor()).unwrap();
        let x2 = store.add("x2", random_image(14, 3, 8, 8).to_tensor()).unwrap();
        let t = random_image(15, 3, 8, 8);
        let report = grad_check(
            &store,
            &[x1, x2],
            |g| {
                let (a, b) = (g.param(x1), g.param(x2));
                loss_graph(g, a, b, &t, &LossConfig::default())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig { charbonnier_eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { freq_weight: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { batch: 0, ..Default::default() }.validate().is_err());
    }

    fn state(total: u64) -> OptimState {
        let cfg = OptimConfig { steps: total as usize, ..Default::default() };
        OptimState::new(&cfg, &ParamStore::new())
    }

    #[test]
    fn cosine_schedule_examples() {
        let s = state(100);
        assert_eq!(cosine_lr(0, &s).unwrap(), 2e-4);
        assert!((cosine_lr(100, &s).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, &s).unwrap() - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(101, &s).is_err());
        let lrs: Vec<f64> = (0..=100).map(|t| cosine_lr(t, &s).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = OptimState::new(&OptimConfig::default(), &s);
        adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(s.get(id).data[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let (mut s, id) = scalar_store(0.0);
        let mut st = OptimState::new(&OptimConfig::default(), &s);
        let mut prev = 0.0;
        for _ in 0..20 {
            adam_step(&mut s, &[Tensor::scalar(0.5)], &mut st, 0.01).unwrap();
            let w = s.get(id).data[0];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimState::new(&OptimConfig::default(), &s);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * s.get(id).data[0];
            adam_step(&mut s, &[Tensor::scalar(g)], &mut st, 0.1).unwrap();
            let go = 2.0 * w;
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get(id).data[0] - w).abs() < 1e-12);
        }
        assert!(w.abs() < 1.0);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let (mut s, _) = scalar_store(1.0);
        let mut st = OptimState::new(&OptimConfig::default(), &s);
        assert!(matches!(adam_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st, 0.1), Err(Error::NonFinite(_))));
        assert!(adam_step(&mut s, &[Tensor::zeros(vec![2])], &mut st, 0.1).is_err());
        assert!(adam_step(&mut s, &[Tensor::scalar(1.0)], &mut st, 0.0).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), Tensor::scalar(0.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15 && (g[0].data[1] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::scalar(0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data[0], 0.5);
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let rows = vec![
            LogRow { step: 1, lr: 2e-4, loss: 0.123456789, psnr: 25.5 },
            LogRow { step: 10, lr: 1e-4, loss: 0.05, psnr: 27.25 },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("step,lr,loss,psnr\n1,0.000200,0.123457,25.500000\n"));
        let back = parse_metrics_csv(&text).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.step, b.step);
            assert!((a.loss - b.loss).abs() < 1e-6 && (a.psnr - b.psnr).abs() < 1e-6);
        }
    }

    fn tiny_run(steps: usize) -> (Vec<SceneTriple>, TrainConfig) {
        let data = synth_dataset(3, 2, 32, 32, &NoiseSpec::default()).unwrap();
        let cfg = TrainConfig {
            model: ModelConfig { base_channels: 4, blocks_per_scale: 1, k_filters: 2, patch: 16 },
            loss: LossConfig::default(),
            optim: OptimConfig { steps, batch: 2, log_every: 2, ..Default::default() },
            seed: 5,
        };
        (data, cfg)
    }

    #[test]
    fn zero_steps_return_initialization() {
        let (data, cfg) = tiny_run(0);
        let out = train_loop(&data, &data[0], &cfg, |_| {}).unwrap();
        assert_eq!(out.weights, ModelWeights::init(cfg.model, cfg.seed).unwrap());
        assert!(out.log.is_empty());
        assert_eq!(out.optim.step, 0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (data, cfg) = tiny_run(5);
        let a = train_loop(&data, &data[1], &cfg, |_| {}).unwrap();
        let b = train_loop(&data, &data[1], &cfg, |_| {}).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.optim, b.optim);
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
        assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 4, 5]);
        assert_ne!(a.weights, ModelWeights::init(cfg.model, cfg.seed).unwrap());
    }

    #[test]
    fn rejects_small_images() {
        let (data, mut cfg) = tiny_run(1);
        cfg.model.patch = 64;
        assert!(train_loop(&data, &data[0], &cfg, |_| {}).is_err());
        assert!(train_loop(&[], &data[0], &tiny_run(1).1, |_| {}).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn loss_never_below_floor(seed in 0u64..1000, fw in 0.0f64..1.0) {
            let (x1, x2, t) = (random_image(seed, 3, 4, 4), random_image(seed + 1, 3, 4, 4), random_image(seed + 2, 3, 4, 4));
            let cfg = LossConfig { freq_weight: fw, ..Default::default() };
            prop_assert!(total_loss(&x1, &x2, &t, &cfg).unwrap() >= (2.0 + fw) * 1e-3);
        }
    }
}
