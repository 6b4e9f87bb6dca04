use serde::{Deserialize, Serialize};

use crate::compute::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on `params`.
/// `step` counts from 1. Parameters without a gradient are left alone.
pub fn adam_step(params: &mut ModelParams, lr: f64, adam: &AdamConfig, step: u64) {
    assert!(step >= 1, "adam step counts from 1");
    let bc1 = 1.0 - adam.beta1.powf(step as f64);
    let bc2 = 1.0 - adam.beta2.powf(step as f64);
    for p in params.iter_mut() {
        let Some(grad) = p.tensor.grad().cloned() else {
            continue;
        };
        p.adam_m
            .zip_mut_with(&grad, |m, &g| *m = adam.beta1 * *m + (1.0 - adam.beta1) * g);
        p.adam_v.zip_mut_with(&grad, |v, &g| {
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g
        });
        let (m, v) = (p.adam_m.clone(), p.adam_v.clone());
        let values = p.tensor.values_mut();
        ndarray::Zip::from(values)
            .and(&m)
            .and(&v)
            .for_each(|w, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + adam.eps);
            });
    }
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: u64, warmup_frac: f64) -> u64 {
    (warmup_frac * total_steps as f64).round() as u64
}

/// Linear ramp from 0 to `base_lr` over the warmup steps, constant after.
pub fn lr_schedule(base_lr: f64, step: u64, total_steps: u64, warmup_frac: f64) -> f64 {
    let warm = warmup_steps(total_steps, warmup_frac);
    if warm > 0 && step <= warm {
        base_lr * step as f64 / warm as f64
    } else {
        base_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0.1, 1, 100, 0.0), 0.1);
        assert_eq!(lr_schedule(0.1, 10, 100, 0.1), 0.1);
        assert_eq!(lr_schedule(0.1, 5, 100, 0.1), 0.05);
        assert_eq!(lr_schedule(0.1, 50, 100, 0.1), 0.1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ModelParams::new();
        params.insert("w", array![[1.0, -2.0]]).unwrap();
        params
            .get_mut("w")
            .unwrap()
            .tensor
            .set_grad(Some(array![[0.0, 0.0]]));
        adam_step(&mut params, 0.1, &AdamConfig::default(), 1);
        assert_eq!(params.get("w").unwrap().values(), &array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut params = ModelParams::new();
        params.insert("w", array![[1.0, -2.0]]).unwrap();
        params
            .get_mut("w")
            .unwrap()
            .tensor
            .set_grad(Some(array![[3.0, -0.5]]));
        adam_step(&mut params, 0.01, &AdamConfig::default(), 1);
        let w = params.get("w").unwrap().values();
        assert!((w[[0, 0]] - 0.99).abs() < 1e-8);
        assert!((w[[0, 1]] + 1.99).abs() < 1e-8);
    }
}
