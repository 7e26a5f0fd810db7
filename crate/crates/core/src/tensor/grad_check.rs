use super::Tensor;
use crate::error::{Error, Result};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::config("eps", format!("{} not in (0, 1e-2]", eps)));
    }
    Ok(())
}

fn finite(v: f64, index: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            index,
            detail: format!("{} evaluated to {}", what, v),
        })
    }
}

/// Maximum relative error between the analytic gradient of scalar `f` at
/// `x` and its central-difference estimate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.to_vec(), x.shape())?;
    grad_check_param(|| f(&leaf), &leaf, eps)
}

/// Same as [`grad_check`] but perturbs a leaf that `f` captures, e.g. one
/// parameter of a network. The leaf's data is restored afterwards and its
/// gradient cleared.
pub fn grad_check_param<F>(f: F, leaf: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    check_eps(eps)?;
    if !leaf.is_leaf() {
        return Err(Error::Contract(
            "grad_check_param needs a leaf tensor".into(),
        ));
    }
    let was_tracked = leaf.requires_grad();
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    let y = f()?;
    finite(y.item(), 0, "f(x)")?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    leaf.zero_grad();
    leaf.set_requires_grad(was_tracked);

    let mut worst = 0.0f64;
    for i in 0..leaf.numel() {
        finite(analytic[i], i, "analytic gradient")?;
        let orig = leaf.data()[i];
        leaf.update_data(|d| d[i] = orig + eps);
        let plus = f().map(|t| t.item());
        leaf.update_data(|d| d[i] = orig - eps);
        let minus = f().map(|t| t.item());
        leaf.update_data(|d| d[i] = orig);
        let numeric =
            (finite(plus?, i, "f(x+eps)")? - finite(minus?, i, "f(x-eps)")?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
