//! Grad-CAM, Grad-CAM++ and XGrad-CAM heatmaps over the last conv block.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datapipe::save_png;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Params};
use crate::rng;
use crate::tensor::ops::resize_bilinear;
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-12;
pub const OVERLAY_ALPHA: f32 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    GradCam,
    GradCamPlusPlus,
    XGradCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 3] = [CamMethod::GradCam, CamMethod::GradCamPlusPlus, CamMethod::XGradCam];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcampp",
            CamMethod::XGradCam => "xgradcam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown CAM method `{s}` (gradcam, gradcampp, xgradcam)")))
    }
}

/// Max-normalized, nonnegative class activation map at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `H_f,W_f`, values in `[0, 1]`.
    pub values: Tensor<f64>,
    pub target_class: usize,
    pub method: CamMethod,
    /// `K,H_f,W_f` of the feature maps the map was built from.
    pub feature_shape: [usize; 3],
}

impl Heatmap {
    /// Row-major `(y, x)` of the largest value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.values.shape()[1];
        let i = argmax(self.values.data());
        (i / w, i % w)
    }

    /// One line per row, space-separated, 6 decimals.
    pub fn to_text(&self) -> String {
        let w = self.values.shape()[1];
        let mut out = String::new();
        for row in self.values.data().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_maps(a: &Tensor<f64>, g: &Tensor<f64>) -> Result<(usize, usize)> {
    if a.ndim() != 3 || a.shape() != g.shape() {
        return Err(Error::shape(
            "cam",
            format!("activations {:?} vs gradients {:?}", a.shape(), g.shape()),
        ));
    }
    Ok((a.shape()[0], a.shape()[1] * a.shape()[2]))
}

/// Per-channel weights for `method` from activations `A` and score
/// gradients `dy/dA`, both `K,H,W`.
pub fn channel_weights(method: CamMethod, a: &Tensor<f64>, g: &Tensor<f64>) -> Result<Vec<f64>> {
    let (k, plane) = check_maps(a, g)?;
    let weights = (0..k)
        .map(|c| {
            let ac = &a.data()[c * plane..(c + 1) * plane];
            let gc = &g.data()[c * plane..(c + 1) * plane];
            match method {
                CamMethod::GradCam => gc.iter().sum::<f64>() / plane as f64,
                CamMethod::GradCamPlusPlus => {
                    let a_sum: f64 = ac.iter().sum();
                    gc.iter()
                        .map(|&gij| {
                            let g2 = gij * gij;
                            let denom = 2.0 * g2 + a_sum * g2 * gij;
                            let alpha = if denom.abs() < DENOM_FLOOR { 0.0 } else { g2 / denom };
                            alpha * gij.max(0.0)
                        })
                        .sum()
                }
                CamMethod::XGradCam => {
                    let a_sum: f64 = ac.iter().sum::<f64>() + DENOM_FLOOR;
                    ac.iter().zip(gc).map(|(&aij, &gij)| aij / a_sum * gij).sum()
                }
            }
        })
        .collect();
    Ok(weights)
}

/// `ReLU(sum_k w_k A^k)`, divided by its maximum unless all zero.
pub fn cam_from_maps(method: CamMethod, a: &Tensor<f64>, g: &Tensor<f64>, target_class: usize) -> Result<Heatmap> {
    let weights = channel_weights(method, a, g)?;
    let (k, plane) = check_maps(a, g)?;
    let mut map = vec![0.0f64; plane];
    for (c, w) in weights.iter().enumerate().take(k) {
        for (m, &v) in map.iter_mut().zip(&a.data()[c * plane..(c + 1) * plane]) {
            *m += w * v;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|m| *m /= max);
    }
    let shape = a.shape();
    Ok(Heatmap {
        values: Tensor::new(vec![shape[1], shape[2]], map)?,
        target_class,
        method,
        feature_shape: [shape[0], shape[1], shape[2]],
    })
}

/// Last-block activations and gradients of `score_scale * logit[class]`
/// for one `C,H,W` image, in inference mode.
pub fn class_score_maps(
    spec: &ModelSpec,
    params: &Params<f32>,
    image: &Tensor<f32>,
    class: usize,
    score_scale: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if class >= spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    if image.ndim() != 3 {
        return Err(Error::shape("cam", format!("expected one C,H,W image, got {:?}", image.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(&shape)?;
    let mut unused = rng::derive(0, 0, 0);
    let mut fwd = spec.forward(params, &x, false, false, &mut unused)?;
    let score = fwd.tape.select(fwd.logits, class)?;
    let score = fwd.tape.scale(score, score_scale as f32)?;
    let mut grads = fwd.tape.backward(score)?;
    let a = fwd.features().clone();
    let g = grads.take(fwd.features).unwrap_or_else(|| Tensor::zeros(a.shape()));
    let drop_batch = |t: Tensor<f32>| -> Result<Tensor<f64>> {
        let s = t.shape()[1..].to_vec();
        t.cast::<f64>().reshape(&s)
    };
    Ok((drop_batch(a)?, drop_batch(g)?))
}

pub fn heatmap(
    spec: &ModelSpec,
    params: &Params<f32>,
    image: &Tensor<f32>,
    class: usize,
    method: CamMethod,
) -> Result<Heatmap> {
    let (a, g) = class_score_maps(spec, params, image, class, 1.0)?;
    cam_from_maps(method, &a, &g, class)
}

pub fn grad_cam(spec: &ModelSpec, params: &Params<f32>, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    heatmap(spec, params, image, class, CamMethod::GradCam)
}

pub fn grad_cam_pp(spec: &ModelSpec, params: &Params<f32>, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    heatmap(spec, params, image, class, CamMethod::GradCamPlusPlus)
}

pub fn xgrad_cam(spec: &ModelSpec, params: &Params<f32>, image: &Tensor<f32>, class: usize) -> Result<Heatmap> {
    heatmap(spec, params, image, class, CamMethod::XGradCam)
}

/// Heatmap bilinearly resized to `height x width`.
pub fn upsample(heatmap: &Heatmap, height: usize, width: usize) -> Result<Tensor<f64>> {
    let (h, w) = (heatmap.values.shape()[0], heatmap.values.shape()[1]);
    let img = heatmap.values.clone().reshape(&[1, h, w])?;
    resize_bilinear(&img, height, width)?.reshape(&[height, width])
}

/// Blue (0) to red (1).
pub fn colormap(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) as f32;
    [v, 0.0, 1.0 - v]
}

/// `0.6 * image + 0.4 * colormap(upsampled heatmap)`, `3,H,W`.
pub fn overlay(heatmap: &Heatmap, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    if image.ndim() != 3 || !(image.shape()[0] == 3 || image.shape()[0] == 1) {
        return Err(Error::shape("overlay", format!("expected a 1- or 3-channel image, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let up = upsample(heatmap, h, w)?;
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, &v) in up.data().iter().enumerate() {
        let color = colormap(v);
        for ch in 0..3 {
            let orig = image.data()[(if c == 1 { 0 } else { ch }) * plane + p];
            out[ch * plane + p] = (1.0 - OVERLAY_ALPHA) * orig + OVERLAY_ALPHA * color[ch];
        }
    }
    Tensor::new(vec![3, h, w], out)
}

pub fn render_overlay(heatmap: &Heatmap, image: &Tensor<f32>, path: &Path) -> Result<()> {
    save_png(&overlay(heatmap, image)?, path)
}

/// `<source_id>_<method>_<class>.png`, with the source id's extension
/// dropped and path separators turned into `_`.
pub fn overlay_file_name(source_id: &str, method: CamMethod, class_name: &str) -> PathBuf {
    let stem = Path::new(source_id).with_extension("");
    let stem = stem.to_string_lossy().replace(['/', '\\'], "_");
    PathBuf::from(format!("{stem}_{method}_{class_name}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(k: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![k, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradients_give_zero_maps() {
        let a = t3(2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 0.5, 0.0, 1.0, 2.0]);
        let g = Tensor::zeros(&[2, 2, 2]);
        for m in CamMethod::ALL {
            let h = cam_from_maps(m, &a, &g, 0).unwrap();
            assert!(h.values.data().iter().all(|&v| v == 0.0), "{m}");
        }
    }

    #[test]
    fn single_channel_constant_gradient_is_normalized_activation() {
        let a = t3(1, 2, 2, &[1.0, 2.0, 0.0, 4.0]);
        let g = Tensor::full(&[1, 2, 2], 0.3);
        for m in CamMethod::ALL {
            let h = cam_from_maps(m, &a, &g, 0).unwrap();
            assert_eq!(h.values.data(), &[0.25, 0.5, 0.0, 1.0], "{m}");
        }
    }

    #[test]
    fn grad_cam_two_channel_hand_case() {
        // weights: mean([1, 1, -1, 3]) = 1, mean([-2, -2, -2, -2]) = -2
        // raw map: A0 - 2 A1 = [1-0, 2-2, 3-4, 4-0] = [1, 0, -1, 4] -> relu / 4
        let a = t3(2, 2, 2, &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 0.0]);
        let g = t3(2, 2, 2, &[1.0, 1.0, -1.0, 3.0, -2.0, -2.0, -2.0, -2.0]);
        let h = cam_from_maps(CamMethod::GradCam, &a, &g, 1).unwrap();
        assert_eq!(h.values.data(), &[0.25, 0.0, 0.0, 1.0]);
        assert_eq!(h.feature_shape, [2, 2, 2]);
        assert_eq!(h.argmax(), (1, 1));
    }

    #[test]
    fn overlay_of_zero_map_is_blend_with_blue() {
        let h = Heatmap {
            values: Tensor::zeros(&[2, 2]),
            target_class: 0,
            method: CamMethod::GradCam,
            feature_shape: [1, 2, 2],
        };
        let img = Tensor::full(&[3, 6, 6], 0.5f32);
        let o = overlay(&h, &img).unwrap();
        assert_eq!(o.shape(), &[3, 6, 6]);
        let p = 36;
        assert!(o.data()[..p].iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(o.data()[p..2 * p].iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(o.data()[2 * p..].iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn overlay_hotspot_follows_upsampled_argmax() {
        let mut v = vec![0.0; 16];
        v[9] = 1.0;
        v[10] = 0.4;
        let h = Heatmap {
            values: Tensor::new(vec![4, 4], v).unwrap(),
            target_class: 0,
            method: CamMethod::GradCam,
            feature_shape: [1, 4, 4],
        };
        let img = Tensor::full(&[3, 16, 16], 0.2f32);
        let up = upsample(&h, 16, 16).unwrap();
        assert_eq!(up.shape(), &[16, 16]);
        let o = overlay(&h, &img).unwrap();
        let red: Vec<f64> = o.data()[..256].iter().map(|&x| x as f64).collect();
        assert_eq!(argmax(&red), argmax(up.data()));
    }

    #[test]
    fn file_names() {
        assert_eq!(
            overlay_file_name("disc/disc_00003.png", CamMethod::GradCamPlusPlus, "disc"),
            PathBuf::from("disc_disc_00003_gradcampp_disc.png")
        );
        assert_eq!("xgradcam".parse::<CamMethod>().unwrap(), CamMethod::XGradCam);
        assert!("cam".parse::<CamMethod>().is_err());
    }
}
