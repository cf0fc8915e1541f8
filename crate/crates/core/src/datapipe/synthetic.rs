//! Synthetic labeled shapes for desk-scale runs: class `k` is a distinct
//! colored shape with jittered position, scale and color plus Gaussian
//! pixel noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{image_io::save_png, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const NOISE_SIGMA: f64 = 0.05;
const BACKGROUND: f64 = 0.1;

const SHAPES: [(&str, [f64; 3]); 8] = [
    ("disc", [0.9, 0.2, 0.2]),
    ("square", [0.2, 0.85, 0.25]),
    ("cross", [0.25, 0.35, 0.95]),
    ("ring", [0.95, 0.85, 0.2]),
    ("triangle", [0.85, 0.3, 0.85]),
    ("bar", [0.2, 0.85, 0.85]),
    ("diamond", [0.95, 0.55, 0.15]),
    ("saltire", [0.7, 0.7, 0.7]),
];

/// Inclusive pixel bounds of a generated shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub samples: Vec<Sample>,
    pub boxes: Vec<BoundingBox>,
    pub class_names: Vec<String>,
}

impl SyntheticSet {
    pub fn bounding_box(&self, source_id: &str) -> Option<BoundingBox> {
        self.samples
            .iter()
            .position(|s| s.source_id == source_id)
            .map(|i| self.boxes[i])
    }
}

/// Membership test in shape-local coordinates scaled so the shape spans
/// roughly `[-1, 1]` on each axis.
fn inside(shape: usize, dx: f64, dy: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        2 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            (0.55..=1.0).contains(&d)
        }
        4 => (-0.9..=0.8).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.55,
        5 => dx.abs() <= 1.0 && dy.abs() <= 0.35,
        6 => dx.abs() + dy.abs() <= 1.0,
        _ => dx.abs() <= 1.0 && dy.abs() <= 1.0 && ((dx - dy).abs() <= 0.35 || (dx + dy).abs() <= 0.35),
    }
}

/// `n_per_class` images for each of `classes` (at most 8) shape classes of
/// `size x size` pixels. Output order is class-major and fully determined by
/// `seed`.
pub fn generate_synthetic(n_per_class: usize, classes: usize, size: usize, seed: u64) -> Result<SyntheticSet> {
    if classes < 2 || classes > SHAPES.len() {
        return Err(Error::InvalidArgument(format!(
            "synthetic data supports 2..=8 classes, got {classes}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size {size} is too small")));
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut samples = Vec::with_capacity(n_per_class * classes);
    let mut boxes = Vec::with_capacity(n_per_class * classes);
    let plane = size * size;
    for class in 0..classes {
        let (name, base_color) = SHAPES[class];
        for i in 0..n_per_class {
            let mut rng = rng::derive(seed, rng::DOMAIN_SYNTH, (class * 1_000_003 + i) as u64);
            let s = size as f64;
            let radius = s * rng.random_range(0.16..0.26);
            let cy = s * rng.random_range(0.3..0.7);
            let cx = s * rng.random_range(0.3..0.7);
            let color = base_color.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));

            let mut data = vec![0.0f32; 3 * plane];
            let mut bbox: Option<BoundingBox> = None;
            for y in 0..size {
                for x in 0..size {
                    let dy = (y as f64 + 0.5 - cy) / radius;
                    let dx = (x as f64 + 0.5 - cx) / radius;
                    let on = inside(class, dx, dy);
                    if on {
                        bbox = Some(match bbox {
                            None => BoundingBox { y0: y, x0: x, y1: y, x1: x },
                            Some(b) => BoundingBox {
                                y0: b.y0.min(y),
                                x0: b.x0.min(x),
                                y1: b.y1.max(y),
                                x1: b.x1.max(x),
                            },
                        });
                    }
                    for (c, &col) in color.iter().enumerate() {
                        let base = if on { col } else { BACKGROUND };
                        let v = base + noise.sample(&mut rng);
                        data[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            samples.push(Sample {
                image: Tensor::new(vec![3, size, size], data)?,
                label: class,
                source_id: format!("{name}/{name}_{i:05}.png"),
            });
            boxes.push(bbox.expect("shape covers at least one pixel"));
        }
    }
    Ok(SyntheticSet {
        samples,
        boxes,
        class_names: SHAPES[..classes].iter().map(|(n, _)| n.to_string()).collect(),
    })
}

/// Writes samples as `root/<class>/<file>.png` following their `source_id`.
pub fn write_image_tree(samples: &[Sample], root: &Path) -> Result<()> {
    for s in samples {
        let path = root.join(&s.source_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_png(&s.image, &path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let a = generate_synthetic(200, 4, 16, 7).unwrap();
        assert_eq!(a.samples.len(), 800);
        for k in 0..4 {
            assert_eq!(a.samples.iter().filter(|s| s.label == k).count(), 200);
        }
        let b = generate_synthetic(200, 4, 16, 7).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(a
            .samples
            .iter()
            .all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn mean_color_nearest_centroid_beats_chance() {
        let set = generate_synthetic(40, 4, 24, 3).unwrap();
        let mean_color = |s: &Sample| -> [f64; 3] {
            let p = 24 * 24;
            [0, 1, 2].map(|c| s.image.data()[c * p..(c + 1) * p].iter().map(|&v| v as f64).sum::<f64>() / p as f64)
        };
        let (fit, eval): (Vec<_>, Vec<_>) = set.samples.iter().enumerate().partition(|(i, _)| i % 2 == 0);
        let mut centroids = vec![[0.0f64; 3]; 4];
        let mut counts = [0usize; 4];
        for (_, s) in &fit {
            let m = mean_color(s);
            for c in 0..3 {
                centroids[s.label][c] += m[c];
            }
            counts[s.label] += 1;
        }
        for (k, cen) in centroids.iter_mut().enumerate() {
            cen.iter_mut().for_each(|v| *v /= counts[k] as f64);
        }
        let correct = eval
            .iter()
            .filter(|(_, s)| {
                let m = mean_color(s);
                let dist = |k: usize| (0..3).map(|c| (m[c] - centroids[k][c]).powi(2)).sum::<f64>();
                (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap() == s.label
            })
            .count();
        let acc = correct as f64 / eval.len() as f64;
        assert!(acc > 0.25, "centroid accuracy {acc}");
    }

    #[test]
    fn bounding_boxes_cover_shape_pixels() {
        let set = generate_synthetic(5, 8, 32, 1).unwrap();
        for (s, b) in set.samples.iter().zip(&set.boxes) {
            assert!(b.y0 <= b.y1 && b.x0 <= b.x1 && b.y1 < 32 && b.x1 < 32, "{}", s.source_id);
        }
        assert!(generate_synthetic(1, 9, 32, 1).is_err());
    }
}
