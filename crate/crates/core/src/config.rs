//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors; missing keys keep their defaults.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::noise::{NoiseKind, NoiseSpec};
use crate::training::{LossConfig, OptimConfig};

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "model.base_channels",
    "model.blocks_per_scale",
    "model.k_filters",
    "model.patch",
    "loss.eps",
    "loss.freq_weight",
    "optim.lr_init",
    "optim.lr_min",
    "optim.steps",
    "optim.batch",
    "data.seed",
    "data.size",
    "data.count",
    "noise.kind",
    "noise.level",
    "noise.sigma",
    "noise.darken",
    "noise.darken_lo",
    "noise.darken_hi",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    /// Side of the square synthetic images.
    pub size: usize,
    /// Number of synthetic training triples.
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, size: 64, count: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    /// The noise seed follows `data.seed`.
    pub noise: NoiseSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            noise: NoiseSpec::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {raw:?}"))),
    }
}

fn kind_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::MixedGp => "mixed-gp",
        NoiseKind::Gaussian => "gaussian",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Config(format!("line {}: unknown key {key:?}", n + 1)))?;
            if seen.contains(known) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            seen.push(known);
            cfg.set(key, raw)?;
        }
        cfg.noise.seed = cfg.data.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "model.base_channels" => self.model.base_channels = value(key, raw)?,
            "model.blocks_per_scale" => self.model.blocks_per_scale = value(key, raw)?,
            "model.k_filters" => self.model.k_filters = value(key, raw)?,
            "model.patch" => self.model.patch = value(key, raw)?,
            "loss.eps" => self.loss.charbonnier_eps = value(key, raw)?,
            "loss.freq_weight" => self.loss.freq_weight = value(key, raw)?,
            "optim.lr_init" => self.optim.lr_init = value(key, raw)?,
            "optim.lr_min" => self.optim.lr_min = value(key, raw)?,
            "optim.steps" => self.optim.steps = value(key, raw)?,
            "optim.batch" => self.optim.batch = value(key, raw)?,
            "data.seed" => self.data.seed = value(key, raw)?,
            "data.size" => self.data.size = value(key, raw)?,
            "data.count" => self.data.count = value(key, raw)?,
            "noise.kind" => self.noise.kind = raw.parse()?,
            "noise.level" => self.noise.level = value(key, raw)?,
            "noise.sigma" => self.noise.sigma = value(key, raw)?,
            "noise.darken" => self.noise.darken = flag(key, raw)?,
            "noise.darken_lo" => self.noise.darken_range.0 = value(key, raw)?,
            "noise.darken_hi" => self.noise.darken_range.1 = value(key, raw)?,
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        let size = self.data.size;
        if size < 32 || !size.is_power_of_two() {
            return Err(Error::Config(format!("data.size must be a power of two >= 32, got {size}")));
        }
        if size < self.model.patch {
            return Err(Error::Config(format!("data.size {size} is smaller than model.patch {}", self.model.patch)));
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let v: Vec<String> = vec![
            self.model.base_channels.to_string(),
            self.model.blocks_per_scale.to_string(),
            self.model.k_filters.to_string(),
            self.model.patch.to_string(),
            self.loss.charbonnier_eps.to_string(),
            self.loss.freq_weight.to_string(),
            self.optim.lr_init.to_string(),
            self.optim.lr_min.to_string(),
            self.optim.steps.to_string(),
            self.optim.batch.to_string(),
            self.data.seed.to_string(),
            self.data.size.to_string(),
            self.data.count.to_string(),
            kind_name(self.noise.kind).to_string(),
            self.noise.level.to_string(),
            self.noise.sigma.to_string(),
            self.noise.darken.to_string(),
            self.noise.darken_range.0.to_string(),
            self.noise.darken_range.1.to_string(),
        ];
        KEYS.iter().zip(v).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
