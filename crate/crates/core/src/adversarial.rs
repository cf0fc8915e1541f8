//! FGSM attacks, adversarial training and robustness sweeps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{sequential_batches, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Params};
use crate::rng;
use crate::tensor::ops::cross_entropy;
use crate::tensor::{sign, Element, Tensor};
use crate::trainer::{train_step, Optimizer, StepOutput};

pub const DEFAULT_EPSILONS: [f64; 7] = [0.0, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Clip adversarial pixels to `[0, 1]`.
    pub clip: bool,
    /// Share of each training batch replaced by its FGSM counterpart.
    pub adversarial_fraction: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            clip: true,
            adversarial_fraction: 0.5,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::InvalidArgument(format!(
                "adversarial fraction must be in [0, 1], got {}",
                self.adversarial_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fgsm<T: Element> {
    pub adversarial: Tensor<T>,
    /// `epsilon * sign(grad)`, before clipping.
    pub perturbation: Tensor<T>,
    /// Inference-mode loss on the clean inputs.
    pub clean_loss: T,
}

/// Input gradient of the mean cross-entropy in inference mode, plus the loss.
pub fn input_gradient<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    let mut unused = rng::derive(0, 0, 0);
    let mut fwd = spec.forward(params, x, false, true, &mut unused)?;
    let (loss, mut grads) = fwd.backward_loss(targets)?;
    let g = grads
        .take(fwd.input)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g, loss))
}

/// `x' = x + epsilon * sign(grad_x L)`, optionally clipped to `[0, 1]`.
pub fn fgsm<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    targets: &Tensor<T>,
    epsilon: f64,
    clip: bool,
) -> Result<Fgsm<T>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (grad, clean_loss) = input_gradient(spec, params, x, targets)?;
    let eps = T::lit(epsilon);
    let perturbation = grad.map(|g| eps * sign(g));
    let mut adversarial = x.zip_map(&perturbation, |a, d| a + d)?;
    if clip {
        adversarial = adversarial.map(|v| v.max(T::zero()).min(T::one()));
    }
    Ok(Fgsm {
        adversarial,
        perturbation,
        clean_loss,
    })
}

#[derive(Clone, Debug)]
pub struct AdversarialStep {
    pub step: StepOutput,
    /// Loss of the attacked rows before perturbation (inference mode).
    pub clean_loss: f64,
    /// Loss of the attacked rows inside the training forward pass.
    pub adv_loss: f64,
    pub attacked: usize,
}

/// One optimizer step on a batch whose first `round(fraction * N)` rows are
/// replaced by FGSM examples crafted against the current weights.
pub fn adversarial_training_step<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &mut Params<f32>,
    optimizer: &mut Optimizer,
    images: &Tensor<f32>,
    targets: &Tensor<f32>,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<AdversarialStep> {
    attack.validate()?;
    let n = images.shape()[0];
    let attacked = ((attack.adversarial_fraction * n as f64).round() as usize).min(n);
    if attacked == 0 {
        let step = train_step(spec, params, optimizer, images, targets, rng)?;
        return Ok(AdversarialStep {
            clean_loss: step.loss,
            adv_loss: step.loss,
            step,
            attacked,
        });
    }
    let head = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let rows: Vec<Tensor<f32>> = (0..attacked).map(|i| t.index_outer(i)).collect();
        Tensor::stack(&rows.iter().collect::<Vec<_>>())
    };
    let head_targets = head(targets)?;
    let attack_out = fgsm(spec, params, &head(images)?, &head_targets, attack.epsilon, attack.clip)?;
    let mut mixed = images.clone();
    for i in 0..attacked {
        mixed
            .outer_mut(i)
            .copy_from_slice(attack_out.adversarial.outer(i));
    }
    let step = train_step(spec, params, optimizer, &mixed, targets, rng)?;
    let adv_probs = head(&step.probs)?;
    let adv_loss = cross_entropy(&adv_probs, &head_targets)? as f64;
    Ok(AdversarialStep {
        step,
        clean_loss: attack_out.clean_loss as f64,
        adv_loss,
        attacked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub validation_loss: Option<f64>,
}

fn attacked_eval(
    spec: &ModelSpec,
    params: &Params<f32>,
    samples: &[Sample],
    epsilon: f64,
    clip: bool,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    for batch in sequential_batches(samples, batch_size) {
        let batch = batch?;
        let targets = Tensor::one_hot(&batch.labels, spec.num_classes)?;
        let x = if epsilon == 0.0 {
            batch.images
        } else {
            fgsm(spec, params, &batch.images, &targets, epsilon, clip)?.adversarial
        };
        let probs = spec.predict(params, &x)?;
        loss_sum += cross_entropy(&probs, &targets)? as f64 * batch.labels.len() as f64;
        correct += probs
            .argmax_rows()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// Accuracy and loss under FGSM at each epsilon. The ladder must be sorted
/// ascending and start at 0 so the first row is the clean baseline.
pub fn robustness_sweep(
    spec: &ModelSpec,
    params: &Params<f32>,
    test: &[Sample],
    validation: Option<&[Sample]>,
    epsilons: &[f64],
    clip: bool,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    if epsilons.first() != Some(&0.0) {
        return Err(Error::InvalidArgument("the epsilon ladder must start at 0".into()));
    }
    if epsilons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("the epsilon ladder must be strictly increasing".into()));
    }
    epsilons
        .iter()
        .map(|&eps| {
            let (accuracy, loss) = attacked_eval(spec, params, test, eps, clip, batch_size)?;
            let validation_loss = match validation {
                Some(v) => Some(attacked_eval(spec, params, v, eps, clip, batch_size)?.1),
                None => None,
            };
            Ok(SweepRow {
                epsilon: eps,
                accuracy,
                loss,
                validation_loss,
            })
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}
