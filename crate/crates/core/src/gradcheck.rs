//! Central-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function of one tensor against
/// central differences and returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradient_check_many(|g, vars| f(g, vars[0]), core::slice::from_ref(x), eps)
}

/// Same as [`gradient_check`], over several input tensors at once.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Argument("gradient_check eps must lie in [1e-6, 1e-3]".into()));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(d) => d.to_vec(),
            None => alloc::vec![0.0; inputs[ti].numel()],
        };
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i];
            let err = libm::fabs(a - numeric) / f64::max(1.0, libm::fabs(a) + libm::fabs(numeric));
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
