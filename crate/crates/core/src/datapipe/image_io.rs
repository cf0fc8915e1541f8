use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an image file into a `C,H,W` tensor in `[0, 1]`; 4 channels when
/// the file carries alpha, otherwise 3.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::ImageRead {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(dynamic_to_tensor(&img))
}

fn dynamic_to_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    if img.color().has_alpha() {
        let rgba = img.to_rgba8();
        let mut data = vec![0.0f32; 4 * plane];
        for (i, px) in rgba.pixels().enumerate() {
            for c in 0..4 {
                data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![4, h, w], data).expect("decoded dimensions")
    } else {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, h, w], data).expect("decoded dimensions")
    }
}

/// Converts a 3-channel `C,H,W` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("tensor_to_rgb8", format!("expected 3,H,W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_rgb8(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
