use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Adam moment coefficients. Learning rate is passed per step so schedules
/// stay outside the optimizer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter, plus the step count
/// used for bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place. `names` is only consulted for
/// error reporting.
pub fn adam_step(
    params: &mut [Array],
    grads: &[Array],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter `{}`",
                names.get(k).map(String::as_str).unwrap_or("?")
            )));
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for (j, (&gj, pj)) in g.data().iter().zip(p.data_mut()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pj -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, p: f64, g: f64) -> (Vec<Array>, Vec<Array>, Vec<String>) {
        (
            vec![Array::scalar(p)],
            vec![Array::scalar(g)],
            vec![name.to_string()],
        )
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut p, g, names) = one("w", 1.5, 0.0);
        let mut st = AdamState::new(&[1]);
        for _ in 0..10 {
            adam_step(&mut p, &g, &names, &mut st, 0.001, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after bias correction, so the update is lr/(1+eps).
        let (mut p, g, names) = one("w", 1.0, 1.0);
        let mut st = AdamState::new(&[1]);
        adam_step(&mut p, &g, &names, &mut st, 0.001, &AdamConfig::default()).unwrap();
        assert!((p[0].data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(p) = p², gradient 2p, from p = 1.
        let mut p = vec![Array::scalar(1.0)];
        let names = vec!["p".to_string()];
        let mut st = AdamState::new(&[1]);
        for _ in 0..1000 {
            let g = vec![Array::scalar(2.0 * p[0].data()[0])];
            adam_step(&mut p, &g, &names, &mut st, 0.01, &AdamConfig::default()).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2, "got {}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut p, mut g, names) = one("enc.l0.w_z", 1.0, 1.0);
        g[0] = Array::scalar(f64::NAN);
        let mut st = AdamState::new(&[1]);
        let err = adam_step(&mut p, &g, &names, &mut st, 0.001, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc.l0.w_z"));
    }
}
