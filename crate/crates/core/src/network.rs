//! Two-stage denoiser: an RGB-only U-Net with a supervised attention bridge,
//! then an RGB/NIR encoder pair fused at every scale and a shared decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fusion::{fdsm_graph, fefm_graph, FdsmParams, FefmParams};
use crate::graph::Graph;
use crate::params::{Conv, Initializer, ParamId, ParamStore};
use crate::tensor::{ConvKind, ImageTensor};

pub const SCALES: usize = 3;
pub const RGB_CHANNELS: usize = 3;
pub const NIR_CHANNELS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_per_scale: usize,
    pub k_filters: usize,
    /// Side of the square patch the filter banks are sized for.
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_channels: 64, blocks_per_scale: 2, k_filters: 4, patch: 64 }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self { base_channels: 8, blocks_per_scale: 2, k_filters: 4, patch: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.k_filters == 0 {
            return Err(Error::Config("k_filters must be >= 1".into()));
        }
        if self.patch < 8 || self.patch % 4 != 0 {
            return Err(Error::Config(format!("patch must be a multiple of 4 and >= 8, got {}", self.patch)));
        }
        Ok(())
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn size_at(&self, scale: usize) -> usize {
        self.patch >> scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn init(init: &mut Initializer, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            a: init.conv(&format!("{name}.a"), ConvKind::Standard, c, c, 3)?,
            b: init.conv(&format!("{name}.b"), ConvKind::Standard, c, c, 3)?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.conv(&self.a, x)?;
        let h = g.tape.gelu(h);
        let h = g.conv(&self.b, h)?;
        g.tape.add(x, h)
    }
}

fn blocks_init(init: &mut Initializer, name: &str, c: usize, n: usize) -> Result<Vec<ResBlock>> {
    (0..n).map(|i| ResBlock::init(init, &format!("{name}.{i}"), c)).collect()
}

fn run_blocks(g: &mut Graph, blocks: &[ResBlock], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.apply(g, x)?;
    }
    Ok(x)
}

/// Upsampling convs, skip matches and blocks for scales 1 and 0.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Decoder {
    up: [Conv; 2],
    skip: [Conv; 2],
    blocks: [Vec<ResBlock>; 2],
}

impl Decoder {
    fn init(init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = |s| cfg.channels_at(s);
        let mut up = Vec::new();
        let mut skip = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..2 {
            up.push(init.conv(&format!("{name}.up{s}"), ConvKind::Standard, c(s + 1), c(s), 3)?);
            skip.push(init.conv(&format!("{name}.skip{s}"), ConvKind::Pointwise, c(s), c(s), 1)?);
            blocks.push(blocks_init(init, &format!("{name}.dec{s}"), c(s), cfg.blocks_per_scale)?);
        }
        Ok(Self {
            up: [up[0], up[1]],
            skip: [skip[0], skip[1]],
            blocks: [blocks.remove(0), blocks.remove(0)],
        })
    }

    fn apply(&self, g: &mut Graph, feats: [Var; SCALES]) -> Result<Var> {
        let mut x = feats[2];
        for s in (0..2).rev() {
            let u = g.tape.upsample2(x)?;
            let u = g.conv(&self.up[s], u)?;
            let k = g.conv(&self.skip[s], feats[s])?;
            let sum = g.tape.add(u, k)?;
            x = run_blocks(g, &self.blocks[s], sum)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamParams {
    /// Predicts the stage-one residual image.
    pub restore: Conv,
    pub mask: Conv,
    pub features: Conv,
}

impl SamParams {
    fn init(init: &mut Initializer, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            restore: init.conv(&format!("{name}.restore"), ConvKind::Standard, c, RGB_CHANNELS, 3)?,
            mask: init.conv(&format!("{name}.mask"), ConvKind::Standard, RGB_CHANNELS, c, 3)?,
            features: init.conv(&format!("{name}.features"), ConvKind::Standard, c, c, 3)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.restore, self.mask, self.features].iter().flat_map(|c| [c.weight, c.bias]).collect()
    }
}

/// Returns `(restored, bridged)`.
pub fn sam_graph(g: &mut Graph, p: &SamParams, features: Var, image: Var) -> Result<(Var, Var)> {
    let residual = g.conv(&p.restore, features)?;
    let restored = g.tape.add(image, residual)?;
    let m = g.conv(&p.mask, restored)?;
    let mask = g.tape.sigmoid(m);
    let f = g.conv(&p.features, features)?;
    let gated = g.tape.mul(f, mask)?;
    let bridged = g.tape.add(gated, features)?;
    Ok((restored, bridged))
}

pub fn sam_forward(
    store: &ParamStore,
    p: &SamParams,
    features: &ImageTensor,
    image: &ImageTensor,
) -> Result<(ImageTensor, ImageTensor)> {
    let mut g = Graph::new(store, false);
    let (f, i) = (g.input(features), g.input(image));
    let (r, b) = sam_graph(&mut g, p, f, i)?;
    Ok((g.image(r)?, g.image(b)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct StageOne {
    stem: Conv,
    enc: [Vec<ResBlock>; SCALES],
    down: [Conv; 2],
    decoder: Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct StageTwo {
    nir_stem: Conv,
    x1_embed: Conv,
    merge: Conv,
    rgb_enc: [Vec<ResBlock>; SCALES],
    nir_enc: [Vec<ResBlock>; SCALES],
    rgb_down: [Conv; 2],
    nir_down: [Conv; 2],
    fdsm: [FdsmParams; SCALES],
    fefm: [FefmParams; SCALES],
    decoder: Decoder,
    head: Conv,
}

/// Typed handles into the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    stage1: StageOne,
    pub sam: SamParams,
    stage2: StageTwo,
}

fn three<T>(mut f: impl FnMut(usize) -> Result<T>) -> Result<[T; 3]> {
    Ok([f(0)?, f(1)?, f(2)?])
}

fn downs(init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Result<[Conv; 2]> {
    let d0 = init.conv(&format!("{name}0"), ConvKind::StridedDown, cfg.channels_at(0), cfg.channels_at(1), 3)?;
    let d1 = init.conv(&format!("{name}1"), ConvKind::StridedDown, cfg.channels_at(1), cfg.channels_at(2), 3)?;
    Ok([d0, d1])
}

impl Layout {
    fn build(init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c0 = cfg.base_channels;
        let n = cfg.blocks_per_scale;
        let stage1 = StageOne {
            stem: init.conv("s1.stem", ConvKind::Standard, RGB_CHANNELS, c0, 3)?,
            enc: three(|s| blocks_init(init, &format!("s1.enc{s}"), cfg.channels_at(s), n))?,
            down: downs(init, "s1.down", cfg)?,
            decoder: Decoder::init(init, "s1", cfg)?,
        };
        let sam = SamParams::init(init, "sam", c0)?;
        let stage2 = StageTwo {
            nir_stem: init.conv("s2.nir_stem", ConvKind::Standard, NIR_CHANNELS, c0, 3)?,
            x1_embed: init.conv("s2.x1_embed", ConvKind::Standard, RGB_CHANNELS, c0, 3)?,
            merge: init.conv("s2.merge", ConvKind::Pointwise, 2 * c0, c0, 1)?,
            rgb_enc: three(|s| blocks_init(init, &format!("s2.rgb_enc{s}"), cfg.channels_at(s), n))?,
            nir_enc: three(|s| blocks_init(init, &format!("s2.nir_enc{s}"), cfg.channels_at(s), n))?,
            rgb_down: downs(init, "s2.rgb_down", cfg)?,
            nir_down: downs(init, "s2.nir_down", cfg)?,
            fdsm: three(|s| {
                let hw = cfg.size_at(s);
                FdsmParams::init(init, &format!("s2.fdsm{s}"), cfg.channels_at(s), cfg.k_filters, hw, hw)
            })?,
            fefm: three(|s| FefmParams::init(init, &format!("s2.fefm{s}"), cfg.channels_at(s)))?,
            decoder: Decoder::init(init, "s2", cfg)?,
            head: init.conv("s2.head", ConvKind::Standard, c0, RGB_CHANNELS, 3)?,
        };
        Ok(Self { stage1, sam, stage2 })
    }

    pub fn fdsm(&self, scale: usize) -> &FdsmParams {
        &self.stage2.fdsm[scale]
    }

    pub fn fefm(&self, scale: usize) -> &FefmParams {
        &self.stage2.fefm[scale]
    }

    /// The two convolutions that produce residual images.
    pub fn heads(&self) -> [Conv; 2] {
        [self.sam.restore, self.stage2.head]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        let layout = Layout::build(&mut init, &config)?;
        let mut weights = Self { config, store, layout };
        weights.zero_common_features();
        Ok(weights)
    }

    /// Zeroes the depthwise stage of every fusion key projection, so that
    /// each fusion block starts out returning its value projection.
    fn zero_common_features(&mut self) {
        for s in 0..SCALES {
            let dw = self.layout.fefm(s).k.depthwise;
            for id in [dw.weight, dw.bias] {
                self.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes both residual heads, so that both outputs equal the input.
    pub fn zero_heads(&mut self) {
        for c in self.layout.heads() {
            for id in [c.weight, c.bias] {
                self.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

/// Number of learnable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(ModelWeights::init(*config, 0)?.param_count())
}

/// Returns `(X1, X2)`, the stage-one and final restorations.
pub fn fcenet_graph(g: &mut Graph, layout: &Layout, noisy: Var, nir: Var) -> Result<(Var, Var)> {
    let s1 = &layout.stage1;
    let mut feats = Vec::with_capacity(SCALES);
    let mut x = g.conv(&s1.stem, noisy)?;
    for s in 0..SCALES {
        if s > 0 {
            x = g.conv(&s1.down[s - 1], x)?;
        }
        x = run_blocks(g, &s1.enc[s], x)?;
        feats.push(x);
    }
    let features = s1.decoder.apply(g, [feats[0], feats[1], feats[2]])?;
    let (x1, bridged) = sam_graph(g, &layout.sam, features, noisy)?;

    let s2 = &layout.stage2;
    let emb = g.conv(&s2.x1_embed, x1)?;
    let cat = g.tape.concat(&[bridged, emb])?;
    let mut r = g.conv(&s2.merge, cat)?;
    let mut n = g.conv(&s2.nir_stem, nir)?;
    let mut fused = Vec::with_capacity(SCALES);
    for s in 0..SCALES {
        if s > 0 {
            r = g.conv(&s2.rgb_down[s - 1], fused[s - 1])?;
            n = g.conv(&s2.nir_down[s - 1], n)?;
        }
        r = run_blocks(g, &s2.rgb_enc[s], r)?;
        n = run_blocks(g, &s2.nir_enc[s], n)?;
        let (f_r, f_n) = fdsm_graph(g, &s2.fdsm[s], n, r)?;
        fused.push(fefm_graph(g, &s2.fefm[s], f_r, f_n)?);
    }
    let out = s2.decoder.apply(g, [fused[0], fused[1], fused[2]])?;
    let residual = g.conv(&s2.head, out)?;
    let x2 = g.tape.add(x1, residual)?;
    Ok((x1, x2))
}

fn check_inputs(config: &ModelConfig, noisy: &ImageTensor, nir: &ImageTensor) -> Result<()> {
    let (c, h, w) = noisy.dims();
    if c != RGB_CHANNELS || nir.channels() != NIR_CHANNELS {
        return Err(Error::shape(format!("expected 3-channel RGB and 1-channel NIR, got {c} and {}", nir.channels())));
    }
    if (nir.height(), nir.width()) != (h, w) {
        return Err(Error::shape(format!("RGB is {h}x{w}, NIR is {}x{}", nir.height(), nir.width())));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by 4")));
    }
    if (h, w) != (config.patch, config.patch) {
        return Err(Error::shape(format!("model patch is {0}x{0}, input is {h}x{w}", config.patch)));
    }
    Ok(())
}

/// Runs the model on one patch of exactly `config.patch` pixels square.
pub fn fcenet_forward(weights: &ModelWeights, noisy: &ImageTensor, nir: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
    check_inputs(&weights.config, noisy, nir)?;
    let mut g = Graph::new(&weights.store, false);
    let (nv, iv) = (g.input(noisy), g.input(nir));
    let (x1, x2) = fcenet_graph(&mut g, &weights.layout, nv, iv)?;
    Ok((g.image(x1)?, g.image(x2)?))
}

fn tile_starts(len: usize, patch: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len - patch + 1).step_by(patch).collect();
    if *v.last().unwrap() + patch < len {
        v.push(len - patch);
    }
    v
}

/// Restores an image of any size at least one patch square by running
/// the model on patch tiles. Where tiles overlap, the later tile wins.
pub fn denoise_image(weights: &ModelWeights, noisy: &ImageTensor, nir: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = noisy.dims();
    let p = weights.config.patch;
    if c != RGB_CHANNELS || nir.channels() != NIR_CHANNELS || (nir.height(), nir.width()) != (h, w) {
        return Err(Error::shape(format!("expected 3xHxW RGB and 1xHxW NIR, got {:?} and {:?}", noisy.dims(), nir.dims())));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by 4")));
    }
    if h < p || w < p {
        return Err(Error::shape(format!("{h}x{w} is smaller than the {p}x{p} model patch")));
    }
    let mut out = ImageTensor::zeros(c, h, w);
    for &y0 in &tile_starts(h, p) {
        for &x0 in &tile_starts(w, p) {
            let (_, x2) = fcenet_forward(weights, &noisy.crop(y0, x0, p, p)?, &nir.crop(y0, x0, p, p)?)?;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        out.set(ch, y0 + y, x0 + x, x2.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}
