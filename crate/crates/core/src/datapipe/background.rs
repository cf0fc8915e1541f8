use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LUMINANCE_CUTOFF: f32 = 0.92;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackgroundMode {
    /// Multiply RGB by the image's alpha channel.
    Alpha,
    /// Zero the bright region connected to the image border.
    Threshold { cutoff: f32 },
    None,
}

impl BackgroundMode {
    pub fn name(&self) -> &'static str {
        match self {
            BackgroundMode::Alpha => "alpha",
            BackgroundMode::Threshold { .. } => "threshold",
            BackgroundMode::None => "none",
        }
    }

    pub fn parse(name: &str, cutoff: f32) -> Result<Self> {
        match name {
            "alpha" => Ok(BackgroundMode::Alpha),
            "threshold" => Ok(BackgroundMode::Threshold { cutoff }),
            "none" => Ok(BackgroundMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown background mode `{other}` (expected alpha, threshold or none)"
            ))),
        }
    }
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Maps a 3- or 4-channel `C,H,W` image to 3 channels with the background
/// suppressed according to `mode`.
pub fn remove_background(image: &Tensor<f32>, mode: BackgroundMode) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 3 || s[0] == 4) {
        return Err(Error::shape(
            "remove_background",
            format!("expected a 3- or 4-channel C,H,W image, got {s:?}"),
        ));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut rgb = image.data()[..3 * plane].to_vec();
    match mode {
        BackgroundMode::None => {}
        BackgroundMode::Alpha => {
            if s[0] != 4 {
                return Err(Error::InvalidArgument(
                    "alpha background mode needs a 4-channel image".into(),
                ));
            }
            let alpha = &image.data()[3 * plane..];
            for c in 0..3 {
                for (v, &a) in rgb[c * plane..(c + 1) * plane].iter_mut().zip(alpha) {
                    *v *= a;
                }
            }
        }
        BackgroundMode::Threshold { cutoff } => {
            let bright: Vec<bool> = (0..plane)
                .map(|i| luminance(rgb[i], rgb[plane + i], rgb[2 * plane + i]) > cutoff)
                .collect();
            let mut seen = vec![false; plane];
            let mut queue = VecDeque::new();
            for y in 0..h {
                for x in 0..w {
                    if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && bright[y * w + x] {
                        seen[y * w + x] = true;
                        queue.push_back((y, x));
                    }
                }
            }
            while let Some((y, x)) = queue.pop_front() {
                let mut visit = |ny: usize, nx: usize| {
                    let i = ny * w + nx;
                    if bright[i] && !seen[i] {
                        seen[i] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            for (i, _) in seen.iter().enumerate().filter(|(_, &s)| s) {
                for c in 0..3 {
                    rgb[c * plane + i] = 0.0;
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], rgb)
}
