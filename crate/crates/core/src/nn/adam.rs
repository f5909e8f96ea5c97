use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{GradMap, ParamRegistry};
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update over every trainable entry.
///
/// Frozen entries are never touched, not even their moments. All gradients
/// are validated before the first write, so a failed call leaves the
/// registry unchanged.
pub fn adam_step<T: Scalar>(
    registry: &mut ParamRegistry<T>,
    grads: &GradMap<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, entry) in registry.iter() {
        if !entry.trainable {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != entry.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}` is {:?}, gradient {:?}", entry.value.shape(), g.shape()),
            ));
        }
    }

    let (lr, b1, b2, eps) = (T::of(cfg.lr), T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
    let one = T::one();
    for (name, entry) in registry.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let g = grads.get(name).expect("validated above");
        entry.step_count += 1;
        let t = entry.step_count as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let m = entry.adam_m.data_mut();
        let v = entry.adam_v.data_mut();
        let theta = entry.value.data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !entry.value.all_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_registry(trainable: bool) -> ParamRegistry<f64> {
        let mut r = ParamRegistry::new();
        r.insert("theta", Tensor::scalar(0.5)).unwrap();
        if trainable {
            r.set_trainable(["theta"]).unwrap();
        }
        r
    }

    fn grads(g: f64) -> GradMap<f64> {
        let mut m = GradMap::new();
        m.accumulate("theta", Tensor::scalar(g)).unwrap();
        m
    }

    #[test]
    fn frozen_entry_is_bitwise_unchanged() {
        let mut r = scalar_registry(false);
        let before = r.entry("theta").unwrap().clone();
        for _ in 0..10 {
            adam_step(&mut r, &grads(3.0), &AdamConfig::default()).unwrap();
        }
        let after = r.entry("theta").unwrap();
        assert!(before.value.bits_eq(&after.value));
        assert!(before.adam_m.bits_eq(&after.adam_m));
        assert_eq!(after.step_count, 0);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // m1 = 0.1, v1 = 0.001, m_hat = 1, v_hat = 1, delta = -0.002 / (1 + 1e-8)
        let mut r = scalar_registry(true);
        adam_step(&mut r, &grads(1.0), &AdamConfig::default()).unwrap();
        let m1 = (1.0 - 0.9) * 1.0;
        let v1 = (1.0 - 0.999) * 1.0;
        let m_hat = m1 / (1.0 - 0.9);
        let v_hat: f64 = v1 / (1.0 - 0.999);
        let expected = 0.5 - 0.002 * m_hat / (v_hat.sqrt() + 1e-8);
        let got = r.get("theta").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!((got - (0.5 - 0.002 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(r.entry("theta").unwrap().step_count, 1);
    }

    #[test]
    fn zero_gradient_is_no_move() {
        let mut r = scalar_registry(true);
        adam_step(&mut r, &grads(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(r.get("theta").unwrap().data()[0], 0.5);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut r = scalar_registry(true);
        let err = adam_step(&mut r, &GradMap::new(), &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
