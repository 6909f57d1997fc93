//! Central finite-difference verification of backward passes.

use thiserror::Error;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so near-zero gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("forward pass is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_relative_error <= self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares backprop gradients of a scalar-valued computation with central differences.
///
/// `f` builds the computation on a fresh graph from the current parameter values. Every scalar
/// of every listed parameter is probed, so keep the parameter set small.
pub fn check_gradients<F>(
    f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    check_gradients_with_step(f, store, params, tolerance, DEFAULT_STEP)
}

pub fn check_gradients_with_step<F>(
    f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance,
    };
    for &id in params {
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).tensor.len()]);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = original + step;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = original - step;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > check.max_relative_error || i == 0 {
                check.max_relative_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_layer_with_squared_loss() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4]).unwrap(),
            false,
        );
        let b = store.add("b", Tensor::vector(vec![0.05, -0.1]).unwrap(), false);
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 0.3, 0.8, -1.2]).unwrap();
        let target = Tensor::matrix(2, 2, vec![0.2, -0.4, 1.0, 0.0]).unwrap();
        let report = check_gradients(
            |g, s| {
                let xv = g.constant(x.clone());
                let wv = g.param(s, w);
                let bv = g.param(s, b);
                let y = g.matmul(xv, wv)?;
                let y = g.add_row(y, bv)?;
                let t = g.constant(target.clone());
                let diff = g.sub(y, t)?;
                let sq = g.mul(diff, diff)?;
                g.sum(sq)
            },
            &mut store,
            &[w, b],
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_relative_error() < 1e-6);
    }

    #[test]
    fn nondeterministic_forward_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0).unwrap(), false);
        let calls = Cell::new(0.0);
        let err = check_gradients(
            |g, s| {
                calls.set(calls.get() + 1.0);
                let wv = g.param(s, w);
                g.scale(wv, calls.get())
            },
            &mut store,
            &[w],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn relative_error_uses_floor_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-7).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
