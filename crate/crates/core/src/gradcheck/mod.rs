//! Central finite differences against [`Tape::backward`].

use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub mod suite;

pub use suite::{run_suite, SuiteEntry, SUITE_STEP, SUITE_TOLERANCE};

/// Outcome of one [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest [`relative_error`] over the checked elements.
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Below this magnitude both gradients count as zero; the numeric estimate
/// of an f64 objective carries round-off around `1e-16 |f| / h`.
pub const ZERO_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, ZERO_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ZERO_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` w.r.t. every non-frozen parameter in
/// `store` with the fourth-order central difference
/// `(f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h`.
///
/// The two-point rule cannot serve both kinds of element at a 1e-4
/// tolerance: a step small enough for curved activations leaves round-off
/// that swamps parameters whose true gradient is zero (attention key
/// biases). Truncation error here is O(h⁴), so h can be large.
///
/// `max_per_param` caps how many elements of each tensor are probed (evenly
/// strided); `None` probes all of them. `f` must be deterministic and return
/// a scalar node.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    max_per_param: Option<usize>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = f(store, &mut t)?;
        let y = t.scalar(v);
        if !y.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(y)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: alloc::vec::Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(|g| g.to_vec());
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            let mut at = |d: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = orig + d;
                let y = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                y
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((String::from(store.name(id)), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&s, id);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(id).unwrap(), &[6.0]);
        let numeric = ((3.0f64 + 1e-3).powi(2) - (3.0f64 - 1e-3).powi(2)) / 2e-3;
        assert!((numeric - 6.0).abs() < 1e-9);
        let r = finite_diff_check(&mut s, 1e-3, None, |s, t| {
            let x = t.param(s, id);
            t.mul(x, x)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::matrix(1, 3, alloc::vec![1.0, 2.0, 3.0]));
        let r = finite_diff_check(&mut s, 1e-5, None, |s, t| {
            let _ = t.param(s, id);
            Ok(t.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut s = ParamStore::<f64>::new();
        assert!(finite_diff_check(&mut s, 0.0, None, |_, t| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(1.0));
        let r = finite_diff_check(&mut s, 1e-5, None, |s, t| {
            let x = t.param(s, id);
            Ok(t.scale(x, f64::INFINITY))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn detects_wrong_derivative() {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::matrix(1, 2, alloc::vec![0.7, -1.3]));
        let r = finite_diff_check(&mut s, 1e-5, None, |s, t| {
            let x = t.param(s, id);
            // x² with the derivative of x²/2.
            let y = t.unary(x, |v| v * v, |v, _| v);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
