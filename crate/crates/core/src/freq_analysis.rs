//! Similarity of high-frequency bands as a function of cutoff.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{ssim, SsimParams};
use crate::noise::SceneTriple;
use crate::spectral::{apply_filter, dft2d, ideal_high_pass, idft2d};
use crate::tensor::ImageTensor;

/// Cutoffs `0.05, 0.10, ..., 0.60`.
pub fn standard_grid() -> Vec<f64> {
    (1..=12).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationCurve {
    pub label: String,
    pub cutoffs: Vec<f64>,
    pub similarities: Vec<f64>,
}

impl CorrelationCurve {
    pub fn new(label: impl Into<String>, cutoffs: Vec<f64>, similarities: Vec<f64>) -> Result<Self> {
        if cutoffs.len() != similarities.len() {
            return Err(Error::shape("cutoffs and similarities differ in length"));
        }
        check_ascending(&cutoffs)?;
        Ok(Self { label: label.into(), cutoffs, similarities })
    }

    pub fn len(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cutoffs.is_empty()
    }

    /// Rank correlation between cutoff and similarity.
    pub fn trend(&self) -> f64 {
        spearman(&self.cutoffs, &self.similarities)
    }
}

fn check_ascending(cutoffs: &[f64]) -> Result<()> {
    if cutoffs.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::invalid("cutoffs must be strictly increasing"));
    }
    if cutoffs.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid("cutoffs must lie in [0, 1]"));
    }
    Ok(())
}

fn high_band(img: &ImageTensor, cutoff: f64) -> Result<ImageTensor> {
    let filt = ideal_high_pass(img.height(), img.width(), cutoff)?;
    Ok(idft2d(&apply_filter(&dft2d(img), &filt)?))
}

/// A single-channel target compared against a multi-channel reference is
/// replicated across the reference's channels.
fn align_channels(target: &ImageTensor, gt: &ImageTensor) -> Result<ImageTensor> {
    if target.channels() == 1 && gt.channels() > 1 {
        target.broadcast_channels(gt.channels())
    } else {
        Ok(target.clone())
    }
}

/// SSIM between the high-pass bands of `target` and `gt`.
pub fn band_similarity(target: &ImageTensor, gt: &ImageTensor, cutoff: f64) -> Result<f64> {
    let target = align_channels(target, gt)?;
    target.check_same_shape(gt)?;
    ssim(&high_band(&target, cutoff)?, &high_band(gt, cutoff)?, &SsimParams::default())
}

pub fn correlation_curve(
    target: &ImageTensor,
    gt: &ImageTensor,
    cutoffs: &[f64],
    label: &str,
) -> Result<CorrelationCurve> {
    check_ascending(cutoffs)?;
    let sims = cutoffs.iter().map(|&c| band_similarity(target, gt, c)).collect::<Result<Vec<_>>>()?;
    CorrelationCurve::new(label, cutoffs.to_vec(), sims)
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of nothing"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Noisy-vs-clean and NIR-vs-clean curves over a set of scene triples.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStudy {
    pub noisy: Vec<CorrelationCurve>,
    pub nir: Vec<CorrelationCurve>,
}

impl PriorStudy {
    pub fn run(triples: &[SceneTriple], cutoffs: &[f64]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::invalid("no triples to analyze"));
        }
        let mut study = PriorStudy { noisy: Vec::new(), nir: Vec::new() };
        for t in triples {
            study.noisy.push(correlation_curve(&t.noisy, &t.clean, cutoffs, "noisy")?);
            study.nir.push(correlation_curve(&t.nir, &t.clean, cutoffs, "nir")?);
        }
        Ok(study)
    }

    /// Median Spearman trend of the noisy and the NIR curves.
    pub fn median_trends(&self) -> Result<(f64, f64)> {
        let trends = |cs: &[CorrelationCurve]| median(&cs.iter().map(CorrelationCurve::trend).collect::<Vec<_>>());
        Ok((trends(&self.noisy)?, trends(&self.nir)?))
    }

    /// Per-cutoff median similarity, one curve per view.
    pub fn median_curves(&self) -> Result<Vec<CorrelationCurve>> {
        let collapse = |cs: &[CorrelationCurve], label: &str| {
            let grid = cs[0].cutoffs.clone();
            let sims = (0..grid.len()).map(|i| median(&cs.iter().map(|c| c.similarities[i]).collect::<Vec<_>>())).collect::<Result<Vec<_>>>()?;
            CorrelationCurve::new(label, grid, sims)
        };
        Ok(vec![collapse(&self.noisy, "noisy")?, collapse(&self.nir, "nir")?])
    }
}

/// Spearman rank correlation, average ranks for ties. Zero when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn curves_to_csv(curves: &[CorrelationCurve]) -> Result<String> {
    let first = curves.first().ok_or_else(|| Error::invalid("no curves to export"))?;
    if curves.iter().any(|c| c.cutoffs != first.cutoffs) {
        return Err(Error::invalid("curves use different cutoff grids"));
    }
    let mut s = String::from("cutoff");
    for c in curves {
        s.push(',');
        s.push_str(&c.label);
    }
    s.push('\n');
    for (i, cut) in first.cutoffs.iter().enumerate() {
        write!(s, "{cut:.6}").unwrap();
        for c in curves {
            write!(s, ",{:.6}", c.similarities[i]).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes the curves as CSV via a temporary file and rename.
pub fn export_curve_csv(curves: &[CorrelationCurve], path: &Path) -> Result<()> {
    let text = curves_to_csv(curves)?;
    write_atomic(path, text.as_bytes())
}

/// Parses CSV produced by [`curves_to_csv`].
pub fn parse_curve_csv(text: &str) -> Result<Vec<CorrelationCurve>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty csv"))?;
    let labels: Vec<&str> = header.split(',').skip(1).collect();
    let mut cutoffs = Vec::new();
    let mut cols = vec![Vec::new(); labels.len()];
    for line in lines.filter(|l| !l.is_empty()) {
        let vals = line
            .split(',')
            .map(|f| f.parse::<f64>().map_err(|e| Error::invalid(format!("bad csv field {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != labels.len() + 1 {
            return Err(Error::invalid("csv row width differs from header"));
        }
        cutoffs.push(vals[0]);
        for (col, v) in cols.iter_mut().zip(&vals[1..]) {
            col.push(*v);
        }
    }
    labels
        .iter()
        .zip(cols)
        .map(|(l, s)| CorrelationCurve::new(*l, cutoffs.clone(), s))
        .collect()
}
