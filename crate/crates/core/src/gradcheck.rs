//! Tape gradients against central finite differences.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{FaultInjection, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub coords: usize,
    pub seed: u64,
    pub fault: FaultInjection,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, coords: 32, seed: 0, fault: FaultInjection::None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < tolerance)
    }

    pub fn extend(&mut self, prefix: &str, other: GradReport) {
        self.tensors.extend(other.tensors.into_iter().map(|mut t| {
            t.name = format!("{prefix}{}", t.name);
            t
        }));
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `loss` with central differences for each
/// tensor in `ids`.
pub fn grad_check(
    store: &ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&mut Graph) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let mut g = Graph::with_fault(store, cfg.fault);
    let l = loss(&mut g)?;
    let grads = g.tape.backward(l)?;
    let analytic = g.param_grads(&grads);
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let l = loss(&mut g)?;
        let v = g.tape.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= cfg.coords { (0..n).collect() } else { sample(&mut rng, n, cfg.coords).into_vec() };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = store.get(id).data[i];
            work.get_mut(id).data[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).data[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).data[i] = orig;
            let fd = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[id.0].data[i], fd));
        }
        report.tensors.push(TensorCheck { name: store.name(id).to_string(), checked: coords.len(), max_rel_err: worst });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn square_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::scalar(3.0)).unwrap();
        (s, w)
    }

    fn square(g: &mut Graph, w: ParamId) -> Result<Var> {
        let v = g.param(w);
        g.tape.mul(v, v)
    }

    #[test]
    fn square_gradient_is_exact() {
        let (s, w) = square_store();
        let r = grad_check(&s, &[w], |g| square(g, w), &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err() < 1e-9, "{r:?}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let (s, w) = square_store();
        let cfg = GradCheckConfig { fault: FaultInjection::DoubleGrad, ..Default::default() };
        let r = grad_check(&s, &[w], |g| square(g, w), &cfg).unwrap();
        assert!(!r.passed(1e-4));
        assert!((r.max_rel_err() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
