//! Central finite-difference check of analytic gradients.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

/// Max relative error between the analytic gradient of `f` at `x` and central
/// differences with step `step`, over every element of `x`.
///
/// `f` receives a fresh graph and the leaf holding `x`, and returns a scalar
/// node. The relative error of element `i` is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F: Element>(
    x: &Tensor<F>,
    step: F,
    f: impl Fn(&mut Graph<F>, NodeId) -> Result<NodeId>,
) -> Result<F> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(x, step, &all, f)
}

/// Like [`finite_difference_check`] but only perturbs the listed elements.
pub fn finite_difference_check_at<F: Element>(
    x: &Tensor<F>,
    step: F,
    indices: &[usize],
    f: impl Fn(&mut Graph<F>, NodeId) -> Result<NodeId>,
) -> Result<F> {
    if step <= F::zero() || !step.is_finite() {
        return Err(invalid!("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let leaf = g.param(x.clone());
    let loss = f(&mut g, leaf)?;
    let base = g.value(loss)?.clone();
    if !base.all_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let analytic = g.backward(loss)?.wrt(leaf);
    let floor = F::of_f64(1e-8);
    let two = F::of_f64(2.0);
    let mut worst = F::zero();
    let mut probe = x.clone();
    for &i in indices {
        if i >= x.len() {
            return Err(invalid!("element {i} out of range"));
        }
        let orig = probe.data()[i];
        let mut eval = |v: F| -> Result<F> {
            probe.data_mut()[i] = v;
            g.set_value(leaf, probe.clone())?;
            let out = g.forward_eval(loss)?.item();
            if !out.is_finite() {
                return Err(Error::Numeric("objective is not finite".into()));
            }
            Ok(out)
        };
        let plus = eval(orig + step)?;
        let minus = eval(orig - step)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (two * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    g.set_value(leaf, x.clone())?;
    Ok(worst)
}
