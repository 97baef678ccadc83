//! Central finite-difference check of tape gradients.

use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub coordinates: usize,
    /// `(analytic, numeric)` for every coordinate, in parameter order.
    pub pairs: Vec<(f64, f64)>,
}

/// Compares analytic gradients of `f` against `(f(p+eps) - f(p-eps)) / (2 eps)`
/// for every scalar of every parameter in `ids`.
///
/// `f` builds a scalar loss on the supplied tape from the current store
/// values. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator. Parameter values are restored before returning.
pub fn finite_diff_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, mut f: F) -> Result<GradCheck, TensorError>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();

    let mut eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let v = tape.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "finite_diff_check" })
        }
    };

    let mut worst: f64 = 0.0;
    let mut pairs = Vec::new();
    for (k, &id) in ids.iter().enumerate() {
        for (i, &a) in analytic[k].iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            pairs.push((a, numeric));
        }
    }
    Ok(GradCheck { max_rel_error: worst, coordinates: pairs.len(), pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let check = finite_diff_check(&mut store, &[x], 1e-5, |s, t| {
            let v = t.param(s, x)?;
            let sq = t.scale(v, v)?;
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(store.grad(x).item(), 6.0);
        assert!(check.max_rel_error < 1e-8, "{check:?}");
        assert_eq!(store.value(x).item(), 3.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let r = finite_diff_check(&mut store, &[x], 1e-3, |s, t| {
            let v = t.param(s, x)?;
            let c = t.constant(Tensor::scalar(f64::MAX));
            let big = t.scale(c, v)?;
            t.sum(big)
        });
        assert!(r.is_err());
    }
}
