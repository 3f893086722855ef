//! Central finite differences, the oracle every analytic gradient is checked against.

use crate::error::{Result, TensorError};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Default perturbation at 64-bit precision.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i` of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_at(&f, x, eps, &all)?;
    Tensor::new(g, x.shape())
}

/// Central differences at the listed element indices only.
pub fn finite_diff_at<F>(f: &F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(TensorError::contract("finite_diff_grad", format!("eps must be positive, got {eps}")));
    }
    let base = x.to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(data, x.shape())?;
        let y = f(&t)?;
        if y.numel() != 1 {
            return Err(TensorError::contract("finite_diff_grad", format!("f must return a scalar, got {:?}", y.shape())));
        }
        Ok(y.item())
    };
    indices
        .iter()
        .map(|&i| {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * eps))
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from producing
/// unbounded ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares backward against central differences for every input of `f`.
///
/// `f` receives the inputs and must return a scalar. At most
/// `max_per_input` evenly spaced elements of each input are perturbed
/// (`usize::MAX` checks all of them).
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    max_per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let indices = spread_indices(p.numel(), max_per_input);
        let consts: Vec<Tensor<f64>> = params.iter().map(|t| t.detach()).collect();
        let partial = |x: &Tensor<f64>| {
            let mut args = consts.clone();
            args[k] = x.clone();
            f(&args)
        };
        let numeric = finite_diff_at(&partial, &consts[k], eps, &indices)?;
        for (&i, &nv) in indices.iter().zip(&numeric) {
            let err = relative_error(analytic[i], nv, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((k, i, analytic[i], nv));
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] over every tensor of a parameter store.
///
/// `f` maps a binding of `store` to a scalar loss. Inputs that are not
/// parameters should be captured by `f`. Report input indices follow store
/// order.
pub fn check_store_gradients<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    floor: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&Binding<f64>) -> Result<Tensor<f64>>,
{
    let bound = store.bind::<f64>(true);
    f(&bound)?.backward()?;
    let grads = bound.grads();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    let mut eval = |k: usize, i: usize, delta: f64| -> Result<f64> {
        let orig = probe.values_mut(k)[i];
        probe.values_mut(k)[i] = orig + delta;
        let y = f(&probe.bind(false));
        probe.values_mut(k)[i] = orig;
        let y = y?;
        if y.numel() != 1 {
            return Err(TensorError::contract("check_store_gradients", format!("f must return a scalar, got {:?}", y.shape())));
        }
        Ok(y.item())
    };
    for (k, p) in store.iter().enumerate() {
        let analytic = grads[k].clone().unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in spread_indices(p.numel(), max_per_param) {
            let numeric = (eval(k, i, eps)? - eval(k, i, -eps)?) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((k, i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}

/// Up to `max` indices spread evenly over `0..n`.
pub fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if max >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|j| j * n / max + (n / max) / 2).map(|i| i.min(n - 1)).collect();
    idx.dedup();
    idx
}
