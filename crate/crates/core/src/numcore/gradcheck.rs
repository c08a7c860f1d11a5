//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Binder, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&g, xv)?;
    scalar_of(out)?;
    let mut grads = g.backward(out)?;
    let analytic = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t);
        scalar_of(f(&g, v)?)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// Per-parameter max relative error of the gradient of a scalar function of a
/// whole [`ParamSet`]. `stride` > 1 checks every `stride`-th coordinate only.
pub fn grad_check_params<F>(f: F, params: &ParamSet, eps: f64, stride: usize) -> Result<Vec<(String, f64)>>
where
    F: for<'g, 'p> Fn(&Binder<'g, 'p>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let binder = Binder::new(&g, params, true);
    let out = f(&binder)?;
    scalar_of(out)?;
    let mut grads = g.backward(out)?;
    let analytic = binder.collect(&mut grads);

    let eval = |p: &ParamSet| -> Result<f64> {
        let g = Graph::new();
        let b = Binder::frozen(&g, p);
        scalar_of(f(&b)?)
    };
    let mut report = Vec::new();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let Some(ad) = analytic.get(name) else { continue };
        let mut worst = 0.0f64;
        for i in (0..t.len()).step_by(stride.max(1)) {
            let orig = t.data()[i];
            work.get_mut(name).expect("present").data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] = orig;
            worst = worst.max(relative_error(ad.data()[i], (up - down) / (2.0 * eps)));
        }
        report.push((name.to_string(), worst));
    }
    Ok(report)
}
