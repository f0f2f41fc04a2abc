//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(invalid!("eps must be positive"));
        }
        Ok(())
    }
}

/// Moments keyed by parameter name; created lazily on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Element = f32> {
    pub config: AdamConfig,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub step_count: u64,
}

impl<F: Element> AdamState<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        })
    }
}

/// One Adam update of every tensor in `params`. `grads` must hold exactly
/// the same names and shapes.
pub fn adam_step<F: Element>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| invalid!("no gradient for parameter '{name}'"))?;
        p.expect_same_shape(g)?;
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(invalid!("gradient for unknown parameter '{extra}'"));
    }
    let c = state.config;
    let t = state.step_count + 1;
    let bc1 = 1.0 - c.beta1.powf(t as f64);
    let bc2 = 1.0 - c.beta2.powf(t as f64);
    let (b1, b2) = (F::of_f64(c.beta1), F::of_f64(c.beta2));
    let (one_b1, one_b2) = (F::of_f64(1.0 - c.beta1), F::of_f64(1.0 - c.beta2));
    let (lr, eps) = (F::of_f64(c.lr), F::of_f64(c.eps));
    let (bc1, bc2) = (F::of_f64(bc1), F::of_f64(bc2));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step_count = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("theta".to_string(), Tensor::new(&[1], vec![v]).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut s = AdamState::new(AdamConfig::default()).unwrap();
        adam_step(&mut p, &single(1.0), &mut s).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p["theta"].data()[0] - expect).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut s = AdamState::new(AdamConfig::default()).unwrap();
        adam_step(&mut p, &single(0.0), &mut s).unwrap();
        assert_eq!(p["theta"].data()[0], 0.7);
    }

    /// Independent scalar Adam loop on f(θ) = θ².
    fn quadratic_oracle(lr: f64, steps: usize) -> Vec<f64> {
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(steps);
        for t in 1..=steps as i32 {
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            out.push(theta);
        }
        out
    }

    #[test]
    fn descends_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg).unwrap();
        let mut p = single(1.0);
        let mut path = Vec::new();
        for _ in 0..200 {
            let theta = p["theta"].data()[0];
            adam_step(&mut p, &single(2.0 * theta), &mut s).unwrap();
            path.push(p["theta"].data()[0]);
        }
        for (a, b) in path.iter().zip(quadratic_oracle(0.1, 200)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Momentum overshoots zero, so |θ| oscillates; its peak per 40-step
        // window still shrinks toward 0.
        let peaks: Vec<f64> = path.chunks(40).map(|w| w.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
        assert!(peaks.windows(2).all(|w| w[1] < w[0]), "{peaks:?}");
        assert!(path[199].abs() < 0.05, "final {}", path[199]);
    }

    #[test]
    fn small_step_decreases_convex_loss() {
        let mut s = AdamState::new(AdamConfig::default()).unwrap();
        let mut p = single(0.3);
        adam_step(&mut p, &single(0.6), &mut s).unwrap();
        let after = p["theta"].data()[0];
        assert!(after * after < 0.09);
    }

    #[test]
    fn gradient_set_must_match() {
        let mut s = AdamState::new(AdamConfig::default()).unwrap();
        let mut p = single(0.0);
        assert!(adam_step(&mut p, &BTreeMap::new(), &mut s).is_err());
        let mut extra = single(1.0);
        extra.insert("other".into(), Tensor::zeros(&[1]));
        assert!(adam_step(&mut p, &extra, &mut s).is_err());
        assert!(AdamState::<f32>::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }).is_err());
    }
}
