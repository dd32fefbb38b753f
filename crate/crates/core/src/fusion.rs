//! Frequency-domain selection and fusion of RGB and NIR features.
//!
//! Selection filters each branch with a per-channel convex combination of
//! learnable frequency responses. Fusion reinforces content common to both
//! branches with spectral channel attention, then subtracts it from the NIR
//! values to keep what only NIR carries.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Conv, Initializer, MlpLayers, Norm, ParamId, ParamStore};
use crate::spectral::{idft2d, FilterTensor, SpectrumTensor};
use crate::tensor::{global_avg_pool, mlp_forward, softmax, ConvKind, ImageTensor, Mlp};

/// `k` real frequency responses of size `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    k: usize,
    height: usize,
    width: usize,
    kernels: Vec<f64>,
}

impl FilterBank {
    pub fn new(k: usize, height: usize, width: usize, kernels: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("filter bank needs at least one kernel"));
        }
        if kernels.len() != k * height * width {
            return Err(Error::shape(format!("{} gains for a {k}x{height}x{width} bank", kernels.len())));
        }
        if kernels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter bank gain".into()));
        }
        Ok(Self { k, height, width, kernels })
    }

    pub fn constant(k: usize, height: usize, width: usize, gain: f64) -> Self {
        Self { k, height, width, kernels: vec![gain; k * height * width] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kernel(&self, j: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.kernels[j * n..(j + 1) * n]
    }

    pub fn kernels(&self) -> &[f64] {
        &self.kernels
    }
}

/// Per-channel softmax over the MLP's `C·k` logits, then the matching convex
/// combination of the bank's kernels.
pub fn dynamic_filter_weights(aggregated: &ImageTensor, mlp: &Mlp, bank: &FilterBank) -> Result<FilterTensor> {
    let (c, h, w) = aggregated.dims();
    if (bank.height, bank.width) != (h, w) {
        return Err(Error::shape(format!("bank is {}x{}, features are {h}x{w}", bank.height, bank.width)));
    }
    let logits = mlp_forward(&global_avg_pool(aggregated), mlp)?;
    if logits.len() != c * bank.k {
        return Err(Error::shape(format!("mlp gives {} logits, need {}", logits.len(), c * bank.k)));
    }
    let n = h * w;
    let mut gains = vec![0.0; c * n];
    for ch in 0..c {
        let weights = softmax(&logits[ch * bank.k..(ch + 1) * bank.k]);
        let out = &mut gains[ch * n..(ch + 1) * n];
        for (j, wj) in weights.iter().enumerate() {
            for (o, g) in out.iter_mut().zip(bank.kernel(j)) {
                *o += wj * g;
            }
        }
    }
    FilterTensor::new(c, h, w, gains)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdsmParams {
    pub channels: usize,
    pub k: usize,
    pub norm_r: Norm,
    pub norm_n: Norm,
    pub fuse: Conv,
    pub mlp_r: MlpLayers,
    pub mlp_n: MlpLayers,
    pub bank_r: ParamId,
    pub bank_n: ParamId,
}

impl FdsmParams {
    pub fn init(init: &mut Initializer, name: &str, channels: usize, k: usize, height: usize, width: usize) -> Result<Self> {
        let hidden = (channels / 2).max(1);
        Ok(Self {
            channels,
            k,
            norm_r: init.norm(&format!("{name}.norm_r"), channels)?,
            norm_n: init.norm(&format!("{name}.norm_n"), channels)?,
            fuse: init.conv(&format!("{name}.fuse"), ConvKind::Standard, 2 * channels, 2 * channels, 3)?,
            mlp_r: init.mlp(&format!("{name}.mlp_r"), channels, hidden, channels * k)?,
            mlp_n: init.mlp(&format!("{name}.mlp_n"), channels, hidden, channels * k)?,
            bank_r: init.filter_bank(&format!("{name}.bank_r"), k, height, width)?,
            bank_n: init.filter_bank(&format!("{name}.bank_n"), k, height, width)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm_r.gamma, self.norm_r.beta, self.norm_n.gamma, self.norm_n.beta];
        v.extend([self.fuse.weight, self.fuse.bias]);
        for m in [&self.mlp_r, &self.mlp_n] {
            v.extend([m.first.weight, m.first.bias, m.second.weight, m.second.bias]);
        }
        v.extend([self.bank_r, self.bank_n]);
        v
    }
}

fn select_branch(g: &mut Graph, aggregated: Var, mlp: &MlpLayers, bank: ParamId, k: usize, x: Var) -> Result<Var> {
    let pooled = g.tape.avg_pool(aggregated)?;
    let logits = g.mlp(mlp, pooled)?;
    let weights = g.tape.softmax_groups(logits, k)?;
    let bank = g.param(bank);
    let df = g.tape.combine_bank(weights, bank)?;
    let spec = g.tape.fft(x)?;
    let filtered = g.tape.cmul_real(spec, df)?;
    g.tape.ifft_real(filtered)
}

/// Returns `(F_R, F_N)`, the filtered RGB and NIR features.
pub fn fdsm_graph(g: &mut Graph, p: &FdsmParams, n: Var, r: Var) -> Result<(Var, Var)> {
    let c = p.channels;
    let ln_r = g.norm(&p.norm_r, r)?;
    let ln_n = g.norm(&p.norm_n, n)?;
    let cat = g.tape.concat(&[ln_r, ln_n])?;
    let fused = g.conv(&p.fuse, cat)?;
    let fused = g.tape.gelu(fused);
    let a_r = g.tape.slice_channels(fused, 0, c)?;
    let a_n = g.tape.slice_channels(fused, c, c)?;
    let f_r = select_branch(g, a_r, &p.mlp_r, p.bank_r, p.k, r)?;
    let f_n = select_branch(g, a_n, &p.mlp_n, p.bank_n, p.k, n)?;
    Ok((f_r, f_n))
}

pub fn fdsm_forward(store: &ParamStore, p: &FdsmParams, n: &ImageTensor, r: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    n.check_same_shape(r)?;
    let mut g = Graph::new(store, false);
    let (nv, rv) = (g.input(n), g.input(r));
    let (f_r, f_n) = fdsm_graph(&mut g, p, nv, rv)?;
    Ok((g.image(f_r)?, g.image(f_n)?))
}

/// A pointwise then depthwise projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub pointwise: Conv,
    pub depthwise: Conv,
}

impl Projection {
    fn init(init: &mut Initializer, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            pointwise: init.conv(&format!("{name}.pw"), ConvKind::Pointwise, c, c, 1)?,
            depthwise: init.conv(&format!("{name}.dw"), ConvKind::Depthwise, c, c, 3)?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.conv(&self.pointwise, x)?;
        g.conv(&self.depthwise, y)
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.pointwise.weight, self.pointwise.bias, self.depthwise.weight, self.depthwise.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FefmParams {
    pub channels: usize,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    /// Log of the attention temperature.
    pub log_alpha: ParamId,
    pub lambda: ParamId,
}

impl FefmParams {
    pub fn init(init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            q: Projection::init(init, &format!("{name}.q"), channels)?,
            k: Projection::init(init, &format!("{name}.k"), channels)?,
            v: Projection::init(init, &format!("{name}.v"), channels)?,
            log_alpha: init.scalar(&format!("{name}.log_alpha"), 0.5 * (channels as f64).ln())?,
            lambda: init.scalar(&format!("{name}.lambda"), 0.5)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = [self.q, self.k, self.v].iter().flat_map(|p| p.ids()).collect();
        v.extend([self.log_alpha, self.lambda]);
        v
    }
}

/// Values produced by the common-feature stage.
#[derive(Clone, Copy, Debug)]
pub struct CfrVars {
    pub spectrum: Var,
    pub attention: Var,
    pub q: Var,
    pub v: Var,
}

pub fn cfr_graph(g: &mut Graph, p: &FefmParams, f_r: Var, f_n: Var) -> Result<CfrVars> {
    let q = p.q.apply(g, f_r)?;
    let k = p.k.apply(g, f_n)?;
    let v = p.v.apply(g, f_n)?;
    let (c, h, w) = g.tape.real(q).dims3()?;
    let fq = g.tape.fft(q)?;
    let fk = g.tape.fft(k)?;
    let logits = g.tape.corr_logits(fq, fk)?;
    let log_alpha = g.param(p.log_alpha);
    let scaled = g.tape.scale_exp_neg(logits, log_alpha, 1.0 / (h * w) as f64)?;
    let attention = g.tape.softmax_groups(scaled, c)?;
    let product = g.tape.cmul(fq, fk)?;
    let spectrum = g.tape.channel_mix(attention, product)?;
    Ok(CfrVars { spectrum, attention, q, v })
}

/// `V − λ·V⊙s + Q⊙s` with `s` the spatial common feature.
pub fn fefm_graph(g: &mut Graph, p: &FefmParams, f_r: Var, f_n: Var) -> Result<Var> {
    let cfr = cfr_graph(g, p, f_r, f_n)?;
    let common = g.tape.ifft_real(cfr.spectrum)?;
    let lambda = g.param(p.lambda);
    let vc = g.tape.mul(cfr.v, common)?;
    let scaled = g.tape.scale_by(vc, lambda)?;
    let dfr = g.tape.sub(cfr.v, scaled)?;
    let qc = g.tape.mul(cfr.q, common)?;
    g.tape.add(dfr, qc)
}

#[derive(Clone, Debug)]
pub struct CfrOutput {
    pub spectrum: SpectrumTensor,
    /// Row-major `C × C`, rows sum to one.
    pub attention: Vec<f64>,
    pub q: ImageTensor,
    pub v: ImageTensor,
}

pub fn cfr_forward(store: &ParamStore, p: &FefmParams, f_r: &ImageTensor, f_n: &ImageTensor) -> Result<CfrOutput> {
    f_r.check_same_shape(f_n)?;
    let mut g = Graph::new(store, false);
    let (rv, nv) = (g.input(f_r), g.input(f_n));
    let out = cfr_graph(&mut g, p, rv, nv)?;
    let (shape, data) = g.tape.complex(out.spectrum);
    Ok(CfrOutput {
        spectrum: SpectrumTensor::new(shape[0], shape[1], shape[2], data.to_vec())?,
        attention: g.tape.real(out.attention).data.clone(),
        q: g.image(out.q)?,
        v: g.image(out.v)?,
    })
}

/// `V − λ·V⊙Re(IDFT(F_CFR))`.
pub fn dfr_forward(v: &ImageTensor, f_cfr: &SpectrumTensor, lambda: f64) -> Result<ImageTensor> {
    if v.dims() != f_cfr.dims() {
        return Err(Error::shape(format!("V is {:?}, spectrum is {:?}", v.dims(), f_cfr.dims())));
    }
    let common = idft2d(f_cfr);
    v.zip_map(&common, |a, s| a - lambda * a * s)
}

pub fn fefm_forward(store: &ParamStore, p: &FefmParams, f_r: &ImageTensor, f_n: &ImageTensor) -> Result<ImageTensor> {
    f_r.check_same_shape(f_n)?;
    let mut g = Graph::new(store, false);
    let (rv, nv) = (g.input(f_r), g.input(f_n));
    let out = fefm_graph(&mut g, p, rv, nv)?;
    g.image(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::spectral::dft2d;
    use num_complex::Complex64;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in ids {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }

    fn fdsm_setup(c: usize, k: usize, h: usize, w: usize) -> (ParamStore, FdsmParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(3));
        let p = FdsmParams::init(&mut init, "fdsm", c, k, h, w).unwrap();
        (store, p)
    }

    fn fefm_setup(c: usize) -> (ParamStore, FefmParams) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(4));
        let p = FefmParams::init(&mut init, "fefm", c).unwrap();
        (store, p)
    }

    fn readout(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        let n = g.tape.real(v).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.tape.dot(v, &w)
    }

    fn mlp_zeros(c: usize, k: usize) -> Mlp {
        Mlp::zeros(c, (c / 2).max(1), c * k)
    }

    #[test]
    fn single_kernel_is_selected() {
        let agg = random_image(1, 2, 4, 4);
        let mut mlp = mlp_zeros(2, 1);
        mlp.b2 = vec![3.0, -7.0];
        let bank = FilterBank::new(1, 4, 4, (0..16).map(|i| i as f64).collect()).unwrap();
        let df = dynamic_filter_weights(&agg, &mlp, &bank).unwrap();
        for c in 0..2 {
            assert_eq!(df.channel(c), bank.kernel(0));
        }
    }

    #[test]
    fn identical_kernels_pass_through() {
        let agg = random_image(2, 2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = mlp_zeros(2, 3);
        mlp.b2.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        let kernel: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
        let bank = FilterBank::new(3, 4, 4, kernel.repeat(3)).unwrap();
        let df = dynamic_filter_weights(&agg, &mlp, &bank).unwrap();
        for c in 0..2 {
            for (a, b) in df.channel(c).iter().zip(&kernel) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_the_bank() {
        let agg = random_image(3, 1, 4, 4);
        let mut kernels = vec![0.0; 16];
        kernels.extend(vec![1.0; 16]);
        let bank = FilterBank::new(2, 4, 4, kernels).unwrap();
        let df = dynamic_filter_weights(&agg, &mlp_zeros(1, 2), &bank).unwrap();
        assert!(df.gains().iter().all(|&v| v == 0.5));
    }

    fn random_mlp(seed: u64, c: usize, k: usize) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = mlp_zeros(c, k);
        for v in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2] {
            v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn permuting_kernels_with_logits_is_invisible() {
        let (c, k, hw) = (2, 2, 16);
        let agg = random_image(4, c, 4, 4);
        let mlp = random_mlp(5, c, k);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kernels: Vec<f64> = (0..k * hw).map(|_| rng.random_range(0.0..2.0)).collect();
        let bank = FilterBank::new(k, 4, 4, kernels.clone()).unwrap();
        let mut swapped = mlp.clone();
        let h = mlp.hidden;
        for ch in 0..c {
            let (a, b) = (ch * k, ch * k + 1);
            swapped.b2.swap(a, b);
            for i in 0..h {
                swapped.w2.swap(a * h + i, b * h + i);
            }
        }
        let mut sk = kernels[hw..].to_vec();
        sk.extend_from_slice(&kernels[..hw]);
        let sbank = FilterBank::new(k, 4, 4, sk).unwrap();
        let a = dynamic_filter_weights(&agg, &mlp, &bank).unwrap();
        let b = dynamic_filter_weights(&agg, &swapped, &sbank).unwrap();
        assert_eq!(a.gains(), b.gains());
    }

    #[test]
    fn graph_weights_match_direct_computation() {
        let (c, k) = (4, 3);
        let (mut store, p) = fdsm_setup(c, k, 8, 8);
        randomize(&mut store, &[p.bank_r], 7, 1.0);
        let agg = random_image(8, c, 8, 8);
        let l1 = store.get(p.mlp_r.first.weight);
        let l2 = store.get(p.mlp_r.second.weight);
        let mlp = Mlp {
            input: c,
            hidden: c / 2,
            output: c * k,
            w1: l1.data.clone(),
            b1: store.get(p.mlp_r.first.bias).data.clone(),
            w2: l2.data.clone(),
            b2: store.get(p.mlp_r.second.bias).data.clone(),
            activation: Default::default(),
        };
        let bank = FilterBank::new(k, 8, 8, store.get(p.bank_r).data.clone()).unwrap();
        let direct = dynamic_filter_weights(&agg, &mlp, &bank).unwrap();

        let mut g = Graph::new(&store, false);
        let a = g.input(&agg);
        let pooled = g.tape.avg_pool(a).unwrap();
        let logits = g.mlp(&p.mlp_r, pooled).unwrap();
        let w = g.tape.softmax_groups(logits, k).unwrap();
        let b = g.param(p.bank_r);
        let df = g.tape.combine_bank(w, b).unwrap();
        for (x, y) in g.tape.real(df).data.iter().zip(direct.gains()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn all_pass_banks_are_identity() {
        let (mut store, p) = fdsm_setup(3, 4, 8, 8);
        randomize(&mut store, &[p.fuse.weight, p.mlp_r.second.weight, p.mlp_n.second.bias], 9, 1.0);
        for id in [p.bank_r, p.bank_n] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 1.0);
        }
        let (n, r) = (random_image(10, 3, 8, 8), random_image(11, 3, 8, 8));
        let (f_r, f_n) = fdsm_forward(&store, &p, &n, &r).unwrap();
        assert!(f_r.max_abs_diff(&r).unwrap() < 1e-9);
        assert!(f_n.max_abs_diff(&n).unwrap() < 1e-9);
    }

    #[test]
    fn zero_nir_bank_blocks_nir() {
        let (mut store, p) = fdsm_setup(2, 4, 8, 8);
        store.get_mut(p.bank_n).data.iter_mut().for_each(|v| *v = 0.0);
        let (n, r) = (random_image(12, 2, 8, 8), random_image(13, 2, 8, 8));
        let (_, f_n) = fdsm_forward(&store, &p, &n, &r).unwrap();
        assert!(f_n.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fdsm_gradients() {
        let (mut store, p) = fdsm_setup(2, 3, 8, 8);
        randomize(&mut store, &[p.bank_r, p.bank_n], 14, 1.0);
        let (n, r) = (random_image(15, 2, 8, 8), random_image(16, 2, 8, 8));
        let report = grad_check(
            &store,
            &p.ids(),
            |g| {
                let (nv, rv) = (g.input(&n), g.input(&r));
                let (f_r, f_n) = fdsm_graph(g, &p, nv, rv)?;
                let both = g.tape.concat(&[f_r, f_n])?;
                readout(g, both, 17)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.tensors.len(), p.ids().len());
        assert!(report.passed(1e-4), "{report:#?}");
    }

    /// Attention and spectrum computed with explicit loops from Q and K.
    fn cfr_oracle(q: &ImageTensor, k: &ImageTensor, alpha: f64) -> (Vec<f64>, Vec<Complex64>) {
        let (c, h, w) = q.dims();
        let n = h * w;
        let (fq, fk) = (dft2d(q), dft2d(k));
        let mut att = vec![0.0; c * c];
        for a in 0..c {
            let mut row = vec![0.0; c];
            for (b, r) in row.iter_mut().enumerate() {
                let mut s = Complex64::new(0.0, 0.0);
                for i in 0..n {
                    s += fq.data()[a * n + i] * fk.data()[b * n + i].conj();
                }
                *r = s.re / (alpha * n as f64);
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for b in 0..c {
                att[a * c + b] = (row[b] - m).exp() / z;
            }
        }
        let mut out = vec![Complex64::new(0.0, 0.0); c * n];
        for a in 0..c {
            for b in 0..c {
                for i in 0..n {
                    out[a * n + i] += att[a * c + b] * fq.data()[b * n + i] * fk.data()[b * n + i];
                }
            }
        }
        (att, out)
    }

    #[test]
    fn cfr_matches_loop_oracle() {
        let (mut store, p) = fefm_setup(2);
        let (f_r, f_n) = (random_image(18, 2, 4, 4), random_image(19, 2, 4, 4));
        store.get_mut(p.log_alpha).data[0] = 0.3;
        let out = cfr_forward(&store, &p, &f_r, &f_n).unwrap();
        let mut g = Graph::new(&store, false);
        let nv = g.input(&f_n);
        let kv = p.k.apply(&mut g, nv).unwrap();
        let k = g.image(kv).unwrap();
        let (att, spec) = cfr_oracle(&out.q, &k, 0.3f64.exp());
        for (a, b) in out.attention.iter().zip(&att) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in out.spectrum.data().iter().zip(&spec) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, p) = fefm_setup(4);
        let out = cfr_forward(&store, &p, &random_image(20, 4, 8, 8), &random_image(21, 4, 8, 8)).unwrap();
        for row in out.attention.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_cfr_is_elementwise_product() {
        let (store, p) = fefm_setup(1);
        let (f_r, f_n) = (random_image(22, 1, 8, 8), random_image(23, 1, 8, 8));
        let out = cfr_forward(&store, &p, &f_r, &f_n).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        let mut g = Graph::new(&store, false);
        let nv = g.input(&f_n);
        let kv = p.k.apply(&mut g, nv).unwrap();
        let (fq, fk) = (dft2d(&out.q), dft2d(&g.image(kv).unwrap()));
        for ((a, q), k) in out.spectrum.data().iter().zip(fq.data()).zip(fk.data()) {
            assert_eq!(*a, q * k);
        }
    }

    #[test]
    fn zero_nir_with_zero_biases_gives_zero_cfr() {
        let (mut store, p) = fefm_setup(2);
        for id in [p.k.pointwise.bias, p.k.depthwise.bias] {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let zero = ImageTensor::zeros(2, 8, 8);
        let out = cfr_forward(&store, &p, &random_image(24, 2, 8, 8), &zero).unwrap();
        assert!(out.spectrum.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn dfr_identities() {
        let v = random_image(25, 2, 8, 8);
        let mut spec = dft2d(&random_image(26, 2, 8, 8));
        spec.data_mut()[3] += Complex64::new(0.0, 5.0);
        assert_eq!(dfr_forward(&v, &spec, 0.0).unwrap(), v);

        let ones = dft2d(&ImageTensor::filled(2, 8, 8, 1.0));
        let out = dfr_forward(&v, &ones, 0.3).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - 0.7 * b).abs() < 1e-12);
        }

        let s = idft2d(&spec);
        let out = dfr_forward(&v, &spec, 0.8).unwrap();
        for i in 0..v.data().len() {
            let expect = v.data()[i] - 0.8 * v.data()[i] * s.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-10);
        }
        assert!(dfr_forward(&v, &dft2d(&ImageTensor::zeros(1, 8, 8)), 0.5).is_err());
    }

    #[test]
    fn fefm_bypass_returns_v() {
        let (mut store, p) = fefm_setup(3);
        for id in p.q.ids() {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(p.lambda).data[0] = 0.0;
        let (f_r, f_n) = (random_image(27, 3, 8, 8), random_image(28, 3, 8, 8));
        let out = fefm_forward(&store, &p, &f_r, &f_n).unwrap();
        let cfr = cfr_forward(&store, &p, &f_r, &f_n).unwrap();
        assert_eq!(out, cfr.v);
        assert_eq!(out.dims(), f_r.dims());
    }

    #[test]
    fn fefm_graph_matches_pieces() {
        let (store, p) = fefm_setup(2);
        let (f_r, f_n) = (random_image(29, 2, 8, 8), random_image(30, 2, 8, 8));
        let out = fefm_forward(&store, &p, &f_r, &f_n).unwrap();
        let cfr = cfr_forward(&store, &p, &f_r, &f_n).unwrap();
        let lambda = store.get(p.lambda).data[0];
        let dfr = dfr_forward(&cfr.v, &cfr.spectrum, lambda).unwrap();
        let common = idft2d(&cfr.spectrum);
        for i in 0..out.data().len() {
            let expect = dfr.data()[i] + cfr.q.data()[i] * common.data()[i];
            assert!((out.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn fefm_gradients() {
        let (mut store, p) = fefm_setup(2);
        randomize(&mut store, &[p.q.pointwise.weight, p.k.pointwise.weight], 31, 0.8);
        let (f_r, f_n) = (random_image(32, 2, 8, 8), random_image(33, 2, 8, 8));
        let report = grad_check(
            &store,
            &p.ids(),
            |g| {
                let (rv, nv) = (g.input(&f_r), g.input(&f_n));
                let out = fefm_graph(g, &p, rv, nv)?;
                readout(g, out, 34)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:#?}");
    }

    #[test]
    fn selection_then_fusion_gradients() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(35));
        let s = FdsmParams::init(&mut init, "s", 2, 2, 8, 8).unwrap();
        let f = FefmParams::init(&mut init, "f", 2).unwrap();
        randomize(&mut store, &[s.bank_r, s.bank_n], 40, 1.0);
        let (n, r) = (random_image(36, 2, 8, 8), random_image(37, 2, 8, 8));
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            &store,
            &ids,
            |g| {
                let (nv, rv) = (g.input(&n), g.input(&r));
                let (f_r, f_n) = fdsm_graph(g, &s, nv, rv)?;
                let out = fefm_graph(g, &f, f_r, f_n)?;
                readout(g, out, 38)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:#?}");
    }

    #[test]
    fn bank_shape_is_checked() {
        let agg = random_image(39, 2, 4, 4);
        let bank = FilterBank::constant(2, 8, 8, 1.0);
        assert!(dynamic_filter_weights(&agg, &mlp_zeros(2, 2), &bank).is_err());
        assert!(FilterBank::new(0, 4, 4, vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_stay_within_kernel_range(seed in 0u64..500) {
                let (c, k) = (2, 3);
                let agg = random_image(seed, c, 4, 4);
                let mlp = random_mlp(seed + 1, c, k);
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
                let kernels: Vec<f64> = (0..k * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
                let bank = FilterBank::new(k, 4, 4, kernels).unwrap();
                let df = dynamic_filter_weights(&agg, &mlp, &bank).unwrap();
                for ch in 0..c {
                    for i in 0..16 {
                        let vals: Vec<f64> = (0..k).map(|j| bank.kernel(j)[i]).collect();
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let v = df.channel(ch)[i];
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
