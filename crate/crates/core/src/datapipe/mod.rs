//! Dataset ingestion, background masking, stratified splitting and batching.

mod background;
mod image_io;
mod prepared;
mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ops::resize_bilinear;
use crate::tensor::Tensor;

pub use background::{remove_background, BackgroundMode, DEFAULT_LUMINANCE_CUTOFF};
pub use image_io::{decode_image, save_png, tensor_to_rgb8};
pub use prepared::{load_prepared, prepared_from_bytes, prepared_to_bytes, save_prepared, PreparedInfo};
pub use synthetic::{generate_synthetic, write_image_tree, BoundingBox, SyntheticSet};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One labeled image, `C,H,W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Validation, SplitKind::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn part(&self, kind: SplitKind) -> &[Sample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Split manifest: `source_id<TAB>class<TAB>split` per line, LF endings,
    /// sorted by source_id.
    pub fn manifest(&self) -> String {
        let mut rows: Vec<(&str, &str, SplitKind)> = SplitKind::ALL
            .iter()
            .flat_map(|&kind| {
                self.part(kind)
                    .iter()
                    .map(move |s| (s.source_id.as_str(), self.class_names[s.label].as_str(), kind))
            })
            .collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (id, class, kind) in rows {
            out.push_str(id);
            out.push('\t');
            out.push_str(class);
            out.push('\t');
            out.push_str(kind.as_str());
            out.push('\n');
        }
        out
    }
}

/// Parses a split manifest into `(source_id, class, split)` records.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String, SplitKind)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    i + 1
                )));
            }
            Ok((fields[0].to_string(), fields[1].to_string(), fields[2].parse()?))
        })
        .collect()
}

/// Loads `root/<class>/*.{png,jpg,jpeg}`. Classes are indexed in
/// lexicographic order of their folder names; samples come back sorted by
/// `source_id` (`<class>/<file name>`).
pub fn load_dataset(
    root: &Path,
    target_size: (usize, usize),
    background: BackgroundMode,
) -> Result<(Vec<Sample>, Vec<String>)> {
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "dataset directory `{}` does not exist",
            root.display()
        )));
    }
    let mut class_names: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_names.sort();
    if class_names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "dataset directory `{}` needs at least two class folders",
            root.display()
        )));
    }

    let mut files: Vec<(String, PathBuf, usize)> = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let mut found: Vec<PathBuf> = std::fs::read_dir(root.join(class))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        if found.is_empty() {
            return Err(Error::EmptyClass(class.clone()));
        }
        found.sort();
        for path in found {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.push((format!("{class}/{name}"), path, label));
        }
    }

    let mut samples: Vec<Sample> = files
        .par_iter()
        .map(|(id, path, label)| {
            let raw = decode_image(path)?;
            let masked = remove_background(&raw, background)?;
            let image = resize_bilinear(&masked, target_size.0, target_size.1)?
                .map(|v| v.clamp(0.0, 1.0));
            Ok(Sample {
                image,
                label: *label,
                source_id: id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    samples.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok((samples, class_names))
}

fn has_image_extension(p: &Path) -> bool {
    p.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str()))
}

/// Per-class sizes `(train, validation, test)` under the floor rule.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let validation = n * 15 / 100;
    (train, validation, n - train - validation)
}

/// Stratified 70/15/15 split. Each class is shuffled independently with a
/// stream derived from `seed`; the output lists are sorted by `source_id`.
pub fn split(samples: Vec<Sample>, class_names: &[String], seed: u64) -> Result<DatasetSplit> {
    let k = class_names.len();
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); k];
    for s in samples {
        if s.label >= k {
            return Err(Error::InvalidArgument(format!(
                "sample `{}` has label {} but only {k} classes exist",
                s.source_id, s.label
            )));
        }
        by_class[s.label].push(s);
    }
    let mut out = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        class_names: class_names.to_vec(),
        split_seed: seed,
    };
    for (label, mut group) in by_class.into_iter().enumerate() {
        if group.len() < 3 {
            return Err(Error::TooFewSamples {
                class: class_names[label].clone(),
                count: group.len(),
            });
        }
        group.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        group.shuffle(&mut rng::derive(seed, rng::DOMAIN_SPLIT, label as u64));
        let (n_train, n_val, _) = split_sizes(group.len());
        let mut rest = group.split_off(n_train);
        let test = rest.split_off(n_val);
        out.train.extend(group);
        out.validation.extend(rest);
        out.test.extend(test);
    }
    for part in [&mut out.train, &mut out.validation, &mut out.test] {
        part.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    }
    Ok(out)
}

/// One mini-batch: images `N,C,H,W` plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        Ok(Self {
            images: Tensor::stack(&images)?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sample visiting order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, rng::DOMAIN_BATCH, epoch as u64));
    order
}

/// Shuffled mini-batches for one epoch; the last batch may be short.
pub fn batches<'a>(
    samples: &'a [Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let order = epoch_order(samples.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let picked: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        Batch::from_samples(&picked)
    }))
}

/// Sequential (unshuffled) batches, used for evaluation.
pub fn sequential_batches(
    samples: &[Sample],
    batch_size: usize,
) -> impl Iterator<Item = Result<Batch>> + '_ {
    samples.chunks(batch_size.max(1)).map(|chunk| {
        let picked: Vec<&Sample> = chunk.iter().collect();
        Batch::from_samples(&picked)
    })
}
