use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

fn check_len<T: Real>(param: &Tensor<T>, grad: &[T]) -> Result<(), TensorError> {
    if param.numel() != grad.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "parameter {:?} with {} gradient values",
            param.shape(),
            grad.len()
        )));
    }
    Ok(())
}

/// `w ← w − lr·g`
pub fn sgd_step<T: Real>(param: &mut Tensor<T>, grad: &[T], lr: f64) -> Result<(), TensorError> {
    check_len(param, grad)?;
    let lr = T::from_f64_lossy(lr);
    for (w, &g) in param.data_mut().iter_mut().zip(grad) {
        *w = *w - lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction; moment estimates are kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn step<T: Real>(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T]) -> Result<(), TensorError> {
        check_len(param, grad)?;
        let c = self.config;
        let s = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        if s.m.len() != grad.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "optimizer state for {name} has {} values, gradient {}",
                s.m.len(),
                grad.len()
            )));
        }
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t);
        let bc2 = 1.0 - c.beta2.powi(s.t);
        for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut s.m).zip(&mut s.v) {
            let g = g.as_f64();
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *w = T::from_f64_lossy(w.as_f64() - update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_rate_is_noop() {
        let mut w = Tensor::<f32>::from_fn(&[3], |i| i as f32);
        let before = w.clone();
        sgd_step(&mut w, &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn sgd_on_square() {
        // f(w) = w², f'(1) = 2, w ← 1 − 0.1·2
        let mut w = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut w, &[2.0], 0.1).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_square() {
        let mut w = Tensor::<f64>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        let mut converged_at = None;
        for step in 0..500 {
            let g = 2.0 * w.data()[0];
            opt.step("w", &mut w, &[g]).unwrap();
            if w.data()[0].abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some(), "final w = {}", w.data()[0]);
        assert!(w.data()[0].abs() < 1e-3, "final w = {}", w.data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = Tensor::<f32>::zeros(&[2]);
        assert!(sgd_step(&mut w, &[1.0], 0.1).is_err());
        assert!(Adam::new(AdamConfig::default()).step("w", &mut w, &[1.0]).is_err());
    }
}
