//! MixUp and CutMix batch synthesis.
//!
//! Partners are drawn by pairing the batch with a shuffled copy of itself.
//! CutMix label weights use the realized (clipped) patch area.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Beta parameter for MixUp; 0 disables it.
    pub mixup_alpha: f64,
    /// Beta parameter for CutMix; 0 disables it.
    pub cutmix_alpha: f64,
    pub apply_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            apply_probability: 1.0,
        }
    }
}

impl AugmentPolicy {
    pub fn is_enabled(&self) -> bool {
        self.mixup_alpha > 0.0 || self.cutmix_alpha > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixup_alpha >= 0.0 && self.cutmix_alpha >= 0.0) {
            return Err(Error::InvalidArgument("augmentation alphas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidArgument(
                "augmentation apply probability must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technique {
    None,
    MixUp,
    CutMix,
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Technique::None => "none",
            Technique::MixUp => "mixup",
            Technique::CutMix => "cutmix",
        })
    }
}

/// What happened to one batch. `lambda` is the weight of the original
/// sample's label (for CutMix, the kept-area fraction).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub technique: Technique,
    pub lambda: f64,
}

impl AugmentRecord {
    pub fn passthrough() -> Self {
        Self {
            technique: Technique::None,
            lambda: 1.0,
        }
    }
}

/// `lambda ~ Beta(alpha, alpha)` from two Gamma(alpha, 1) draws, redrawn
/// until strictly inside (0, 1).
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("beta alpha must be > 0, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    loop {
        let g1 = gamma.sample(rng);
        let g2 = gamma.sample(rng);
        let total = g1 + g2;
        if total > 0.0 && total.is_finite() {
            let lambda = g1 / total;
            if lambda > 0.0 && lambda < 1.0 {
                return Ok(lambda);
            }
        }
    }
}

/// A derangement of `0..n` (identity for `n < 2`): shuffle, then pair each
/// position with the next one around the cycle.
pub fn pairing_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 {
        return order;
    }
    order.shuffle(rng);
    let mut perm = vec![0; n];
    for i in 0..n {
        perm[order[i]] = order[(i + 1) % n];
    }
    perm
}

fn check_pairing(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("pairing is not a permutation".into()));
        }
    }
    if perm.len() != n {
        return Err(Error::shape("pairing", format!("{} entries for batch of {n}", perm.len())));
    }
    let fixed = perm.iter().enumerate().filter(|(i, &p)| *i == p).count();
    if fixed != 0 && fixed != n {
        return Err(Error::InvalidArgument(
            "pairing must be a derangement or the identity".into(),
        ));
    }
    Ok(())
}

fn check_batch(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(usize, usize)> {
    if x.ndim() != 4 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape(
            "augment",
            format!("images {:?} vs labels {:?}", x.shape(), y.shape()),
        ));
    }
    Ok((x.shape()[0], x.item_len()))
}

/// `x_new = lambda x_i + (1 - lambda) x_perm(i)`, same for labels.
pub fn mixup(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    lambda: f64,
    perm: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (n, _) = check_batch(x, y)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    check_pairing(perm, n)?;
    let blend = |t: &Tensor<f32>| -> Tensor<f32> {
        let mut out = t.clone();
        for (i, &j) in perm.iter().enumerate() {
            let (a, b) = (t.outer(i), t.outer(j));
            for ((o, &va), &vb) in out.outer_mut(i).iter_mut().zip(a).zip(b) {
                *o = (lambda * va as f64 + (1.0 - lambda) * vb as f64) as f32;
            }
        }
        out
    };
    Ok((blend(x), blend(y)))
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Patch {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// Patch of `h x w` centered at `(cy, cx)`, clipped to the image.
    pub fn centered(cy: usize, cx: usize, h: usize, w: usize, height: usize, width: usize) -> Self {
        let clip = |c: usize, size: usize, extent: usize| {
            let lo = c as i64 - (size / 2) as i64;
            let hi = lo + size as i64;
            (lo.clamp(0, extent as i64) as usize, hi.clamp(0, extent as i64) as usize)
        };
        let (y0, y1) = clip(cy, h, height);
        let (x0, x1) = clip(cx, w, width);
        Self { y0, x0, y1, x1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutMixOutput {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    /// `H,W` mask shared by the batch: 1 keeps the original pixel, 0 takes
    /// the partner's.
    pub mask: Tensor<f32>,
    pub patch: Patch,
    /// Drawn Beta value before rounding and clipping.
    pub drawn_lambda: f64,
    /// Realized label weight of the original sample, `mean(mask)`.
    pub weight: f64,
}

/// Pastes `patch` from each sample's partner. Label weight is the mask mean.
pub fn cutmix_patch(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    perm: &[usize],
    patch: Patch,
) -> Result<CutMixOutput> {
    let (n, _) = check_batch(x, y)?;
    check_pairing(perm, n)?;
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    if patch.y1 > h || patch.x1 > w || patch.y0 > patch.y1 || patch.x0 > patch.x1 {
        return Err(Error::InvalidArgument(format!("patch {patch:?} outside {h}x{w} image")));
    }
    let mut mask = Tensor::full(&[h, w], 1.0f32);
    for yy in patch.y0..patch.y1 {
        for xx in patch.x0..patch.x1 {
            mask.data_mut()[yy * w + xx] = 0.0;
        }
    }
    let kept = mask.data().iter().filter(|&&m| m == 1.0).count();
    let weight = kept as f64 / (h * w) as f64;

    let mut images = x.clone();
    for (i, &j) in perm.iter().enumerate() {
        let src = x.outer(j);
        let dst = images.outer_mut(i);
        for ch in 0..c {
            for yy in patch.y0..patch.y1 {
                let row = (ch * h + yy) * w;
                dst[row + patch.x0..row + patch.x1].copy_from_slice(&src[row + patch.x0..row + patch.x1]);
            }
        }
    }
    let mut labels = y.clone();
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (y.outer(i), y.outer(j));
        for ((o, &va), &vb) in labels.outer_mut(i).iter_mut().zip(a).zip(b) {
            *o = (weight * va as f64 + (1.0 - weight) * vb as f64) as f32;
        }
    }
    Ok(CutMixOutput {
        images,
        labels,
        mask,
        patch,
        drawn_lambda: weight,
        weight,
    })
}

/// CutMix with `lambda ~ Beta(alpha, alpha)`, a patch of
/// `round(H sqrt(1-lambda)) x round(W sqrt(1-lambda))` at a uniform center,
/// and in-batch partners.
pub fn cutmix<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    alpha: f64,
    rng: &mut R,
) -> Result<CutMixOutput> {
    let (n, _) = check_batch(x, y)?;
    let lambda = sample_beta(alpha, rng)?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let ratio = (1.0 - lambda).sqrt();
    let ph = (h as f64 * ratio).round() as usize;
    let pw = (w as f64 * ratio).round() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let perm = pairing_permutation(n, rng);
    let mut out = cutmix_patch(x, y, &perm, Patch::centered(cy, cx, ph, pw, h, w))?;
    out.drawn_lambda = lambda;
    Ok(out)
}

/// Applies the policy to a batch of images and one-hot labels. With
/// probability `apply_probability` one technique is used (a fair coin picks
/// when both are enabled); otherwise the batch passes through untouched.
pub fn apply_policy<R: Rng + ?Sized>(
    policy: &AugmentPolicy,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>, AugmentRecord)> {
    policy.validate()?;
    check_batch(x, y)?;
    if !policy.is_enabled() || policy.apply_probability == 0.0 {
        return Ok((x.clone(), y.clone(), AugmentRecord::passthrough()));
    }
    if rng.random::<f64>() >= policy.apply_probability {
        return Ok((x.clone(), y.clone(), AugmentRecord::passthrough()));
    }
    let technique = match (policy.mixup_alpha > 0.0, policy.cutmix_alpha > 0.0) {
        (true, true) => {
            if rng.random::<bool>() {
                Technique::MixUp
            } else {
                Technique::CutMix
            }
        }
        (true, false) => Technique::MixUp,
        _ => Technique::CutMix,
    };
    match technique {
        Technique::MixUp => {
            let lambda = sample_beta(policy.mixup_alpha, rng)?;
            let perm = pairing_permutation(x.shape()[0], rng);
            let (xn, yn) = mixup(x, y, lambda, &perm)?;
            Ok((xn, yn, AugmentRecord { technique, lambda }))
        }
        _ => {
            let out = cutmix(x, y, policy.cutmix_alpha, rng)?;
            Ok((
                out.images,
                out.labels,
                AugmentRecord {
                    technique,
                    lambda: out.weight,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch(n: usize, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
        let x = Tensor::from_fn(&[n, 3, h, w], |i| ((i * 37) % 101) as f32 / 100.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        (x, Tensor::one_hot(&labels, 4).unwrap())
    }

    #[test]
    fn beta_rejects_nonpositive_alpha() {
        let mut r = rng::derive(0, 0, 0);
        assert!(sample_beta(0.0, &mut r).is_err());
        assert!(sample_beta(-1.0, &mut r).is_err());
    }

    #[test]
    fn beta_moments() {
        let mut r = rng::derive(1, 0, 0);
        for alpha in [0.2, 0.5, 1.0, 2.0] {
            let draws: Vec<f64> = (0..10_000).map(|_| sample_beta(alpha, &mut r).unwrap()).collect();
            let mean = draws.iter().sum::<f64>() / 1e4;
            assert!((mean - 0.5).abs() <= 0.01, "alpha {alpha}: mean {mean}");
            assert!(draws.iter().all(|&l| l > 0.0 && l < 1.0));
        }
        let draws: Vec<f64> = (0..10_000).map(|_| sample_beta(0.2, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / 1e4;
        let var = draws.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
        let expected = 1.0 / (4.0 * (2.0 * 0.2 + 1.0));
        assert!((var - expected).abs() / expected < 0.10, "variance {var} vs {expected}");
    }

    #[test]
    fn mixup_identity_and_constant_images() {
        let (x, y) = batch(4, 4, 4);
        let perm = pairing_permutation(4, &mut rng::derive(2, 0, 0));
        let (xn, yn) = mixup(&x, &y, 1.0, &perm).unwrap();
        assert_eq!((xn, yn), (x.clone(), y.clone()));

        let mut x2 = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        x2.outer_mut(1).fill(1.0);
        let y2 = Tensor::one_hot(&[0, 1], 2).unwrap();
        let (xn, yn) = mixup(&x2, &y2, 0.25, &[1, 0]).unwrap();
        assert!(xn.outer(0).iter().all(|&v| v == 0.75));
        assert_eq!(yn.outer(0), &[0.25, 0.75]);
    }

    #[test]
    fn mixup_rejects_partial_fixed_points_and_shape_mismatch() {
        let (x, y) = batch(3, 2, 2);
        assert!(mixup(&x, &y, 0.5, &[0, 2, 1]).is_err());
        assert!(mixup(&x, &y, 0.5, &[0, 1, 2]).is_ok());
        let (_, y4) = batch(4, 2, 2);
        assert!(mixup(&x, &y4, 0.5, &[1, 2, 0]).is_err());
    }

    #[test]
    fn cutmix_forced_patch_area() {
        let (x, y) = batch(2, 8, 8);
        let patch = Patch { y0: 2, x0: 2, y1: 6, x1: 6 };
        let out = cutmix_patch(&x, &y, &[1, 0], patch).unwrap();
        assert_eq!(out.weight, 0.75);
        let expected: Vec<f32> = y
            .outer(0)
            .iter()
            .zip(y.outer(1))
            .map(|(&a, &b)| (0.75 * a as f64 + 0.25 * b as f64) as f32)
            .collect();
        assert_eq!(out.labels.outer(0), expected.as_slice());
        for ch in 0..3 {
            for yy in 0..8 {
                for xx in 0..8 {
                    let idx = (ch * 8 + yy) * 8 + xx;
                    let src = if patch.y0 <= yy && yy < patch.y1 && patch.x0 <= xx && xx < patch.x1 { 1 } else { 0 };
                    assert_eq!(out.images.outer(0)[idx], x.outer(src)[idx]);
                }
            }
        }
    }

    #[test]
    fn cutmix_empty_patch_is_identity() {
        let (x, y) = batch(3, 5, 5);
        let out = cutmix_patch(&x, &y, &[1, 2, 0], Patch { y0: 2, x0: 2, y1: 2, x1: 2 }).unwrap();
        assert_eq!(out.weight, 1.0);
        assert_eq!(out.images, x);
        assert_eq!(out.labels, y);
    }

    #[test]
    fn patch_clipping() {
        let p = Patch::centered(0, 7, 4, 4, 8, 8);
        assert_eq!(p, Patch { y0: 0, x0: 5, y1: 2, x1: 8 });
        assert_eq!(p.area(), 6);
    }

    #[test]
    fn disabled_or_zero_probability_policy_passes_through() {
        let (x, y) = batch(4, 4, 4);
        let mut r = rng::derive(3, 0, 0);
        let (xn, yn, rec) = apply_policy(&AugmentPolicy::default(), &x, &y, &mut r).unwrap();
        assert_eq!((xn, yn, rec.technique), (x.clone(), y.clone(), Technique::None));
        let p = AugmentPolicy {
            mixup_alpha: 0.2,
            cutmix_alpha: 0.3,
            apply_probability: 0.0,
        };
        let (xn, _, rec) = apply_policy(&p, &x, &y, &mut r).unwrap();
        assert_eq!((xn, rec.technique), (x, Technique::None));
    }

    #[test]
    fn application_rate_and_coin() {
        let (x, y) = batch(4, 4, 4);
        let p = AugmentPolicy {
            mixup_alpha: 0.2,
            cutmix_alpha: 0.3,
            apply_probability: 0.5,
        };
        let mut r = rng::derive(4, 0, 0);
        let mut applied = 0;
        let mut mix = 0;
        for _ in 0..1000 {
            let (_, _, rec) = apply_policy(&p, &x, &y, &mut r).unwrap();
            match rec.technique {
                Technique::None => {}
                Technique::MixUp => {
                    applied += 1;
                    mix += 1;
                }
                Technique::CutMix => applied += 1,
            }
        }
        let rate = applied as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&rate), "rate {rate}");
        assert!(mix > 150 && applied - mix > 150);
    }
}
