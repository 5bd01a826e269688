//! Central finite-difference check of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose analytic gradient was not exactly zero.
    pub nonzero: usize,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compares the analytic gradient returned by `loss_and_grad` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on `samples` coordinates, drawn round-robin over
/// the parameters and uniformly within each. Relative error uses
/// `|a − n| / (|a| + |n| + 1e-10)`.
pub fn finite_diff_check<F>(
    loss_and_grad: F,
    store: &ParameterStore,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if store.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    let (_, analytic) = loss_and_grad(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        nonzero: 0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for s in 0..samples {
        let pid = s % store.len();
        let n = store.by_id(pid).len();
        if n == 0 {
            continue;
        }
        let idx = rng.random_range(0..n);
        let orig = store.by_id(pid).data()[idx];
        probe.by_id_mut(pid).data_mut()[idx] = orig + eps;
        let (plus, _) = loss_and_grad(&probe)?;
        probe.by_id_mut(pid).data_mut()[idx] = orig - eps;
        let (minus, _) = loss_and_grad(&probe)?;
        probe.by_id_mut(pid).data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.by_id(pid)[idx];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-10);
        report.checked += 1;
        report.nonzero += usize::from(a != 0.0);
        if rel > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_param = store.name(pid).to_owned();
            report.worst_index = idx;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Array, Tape};

    #[test]
    fn linear_loss_is_exact() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Array::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let f = |st: &ParameterStore| {
            let mut t = Tape::new(st);
            let w = t.param("w")?;
            let c = t.constant(vec![1.5, -2.0, 0.25]);
            let l = t.dot(w, c)?;
            Ok((t.scalar(l), t.backward(l)?))
        };
        let r = finite_diff_check(f, &s, 1e-5, 30, 1).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 30);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut s = ParameterStore::new(0);
        s.insert("w", Array::vector(vec![0.0])).unwrap();
        let f = |_: &ParameterStore| Ok((0.0, Gradients::zeros_like(&s)));
        assert!(finite_diff_check(f, &s, 1e-2, 1, 0).is_err());
    }

    #[test]
    fn nonlinear_ops_pass() {
        let mut s = ParameterStore::new(0);
        s.insert("a", Array::vector(vec![0.3, -0.7, 1.1])).unwrap();
        s.insert("b", Array::vector(vec![0.2, 0.5, -0.4])).unwrap();
        let f = |st: &ParameterStore| {
            let mut t = Tape::new(st);
            let a = t.param("a")?;
            let b = t.param("b")?;
            let sa = t.sigmoid(a);
            let tb = t.tanh(b);
            let m = t.mul(sa, tb)?;
            let p = t.softmax(m);
            let d = t.dot(p, b)?;
            let sc = t.scale(d, a)?;
            let parts: Vec<_> = (0..3).map(|i| t.slice(sc, i, 1).unwrap()).collect();
            let cat = t.concat(&parts);
            let tot = t.sum(&[cat, a], 3)?;
            let ones = t.constant(vec![1.0; 3]);
            let z = t.dot(tot, ones)?;
            let l1 = t.bce_logit(z, 1.0)?;
            let l2 = t.bce_logit(d, 0.0)?;
            let l = t.mean(&[l1, l2])?;
            Ok((t.scalar(l), t.backward(l)?))
        };
        let r = finite_diff_check(f, &s, 1e-5, 60, 2).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert!(r.nonzero > 0);
    }
}
