use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FreezeMask, Params};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the shared timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub step: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = |p: &Params<T>| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

/// One bias-corrected Adam update. Parameters rejected by `mask` are left
/// untouched (their moments too); the timestep always advances.
pub fn adam_step<T: Element>(
    params: &mut Params<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
    mask: &FreezeMask,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::shape("adam_step", format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !state.m.contains_key(name) {
            state.m.insert(name.clone(), Tensor::zeros(p.shape()));
            state.v.insert(name.clone(), Tensor::zeros(p.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let correction1 = T::lit(1.0 - config.beta1.powi(t));
    let correction2 = T::lit(1.0 - config.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(config.epsilon));
    let one = T::one();
    for (name, p) in params.iter_mut() {
        if !mask.is_trainable(name) {
            continue;
        }
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moment initialized");
        let v = state.v.get_mut(name).expect("moment initialized");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `initial_lr * gamma^floor(epoch / step_size)`.
pub fn step_lr(initial_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    initial_lr * gamma.powi((epoch / step_size.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> Params<f64> {
        [("theta".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        [("theta".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params_but_advances_time() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads(0.0), &mut s, 1e-3, &AdamConfig::default(), &FreezeMask::default()).unwrap();
        assert_eq!(p["theta"].data(), &[0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grads(1.0), &mut s, 1e-3, &AdamConfig::default(), &FreezeMask::default()).unwrap();
        let theta = p["theta"].data()[0];
        assert!((theta + 0.001).abs() < 1e-10, "{theta}");
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let g = 2.0 * p["theta"].data()[0];
            adam_step(&mut p, &grads(g), &mut s, 0.1, &AdamConfig::default(), &FreezeMask::default()).unwrap();
        }
        let theta = p["theta"].data()[0];
        assert!(theta.abs() < 1e-2, "{theta}");
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p: Params<f64> = [
            ("block0.kernel".to_string(), Tensor::scalar(1.0)),
            ("head.output.bias".to_string(), Tensor::scalar(1.0)),
        ]
        .into_iter()
        .collect();
        let g: IndexMap<String, Tensor<f64>> = p.iter().map(|(k, _)| (k.clone(), Tensor::scalar(0.5))).collect();
        let mut s = AdamState::new(&p);
        let mask = FreezeMask { frozen_blocks: 1 };
        adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default(), &mask).unwrap();
        assert_eq!(p["block0.kernel"].data(), &[1.0]);
        assert!(p["head.output.bias"].data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let bad: IndexMap<String, Tensor<f64>> = [("theta".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        assert!(adam_step(&mut p, &bad, &mut s, 0.1, &AdamConfig::default(), &FreezeMask::default()).is_err());
    }

    #[test]
    fn step_lr_schedule() {
        for e in 0..3 {
            assert_eq!(step_lr(1e-3, e, 3, 0.5), 1e-3);
        }
        for e in 3..6 {
            assert_eq!(step_lr(1e-3, e, 3, 0.5), 5e-4);
        }
        for e in 6..9 {
            assert_eq!(step_lr(1e-3, e, 3, 0.5), 2.5e-4);
        }
        assert!((0..30).all(|e| step_lr(0.01, e, 3, 1.0) == 0.01));
    }
}
