//! Preprocessed, split dataset stored in the tensor archive container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Sample, SplitKind};
use crate::error::{Error, Result};
use crate::model::{read_archive, write_archive, ArchiveRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedInfo {
    pub image_size: (usize, usize),
    pub background: String,
    pub split_seed: u64,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    id: String,
    label: usize,
    split: SplitKind,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    info: PreparedInfo,
    samples: Vec<Entry>,
}

pub fn prepared_to_bytes(split: &DatasetSplit, info: &PreparedInfo) -> Result<Vec<u8>> {
    let mut records = Vec::with_capacity(split.len());
    let mut samples = Vec::with_capacity(split.len());
    for kind in SplitKind::ALL {
        for s in split.part(kind) {
            records.push((s.source_id.clone(), ArchiveRecord::F32(s.image.clone())));
            samples.push(Entry {
                id: s.source_id.clone(),
                label: s.label,
                split: kind,
            });
        }
    }
    let meta = Meta {
        info: info.clone(),
        samples,
    };
    Ok(write_archive(&records, &serde_json::to_vec(&meta)?))
}

pub fn prepared_from_bytes(bytes: &[u8]) -> Result<(DatasetSplit, PreparedInfo)> {
    let (records, meta) = read_archive(bytes)?;
    let meta: Meta = serde_json::from_slice(&meta)
        .map_err(|e| Error::InvalidArgument(format!("prepared data metadata: {e}")))?;
    if records.len() != meta.samples.len() {
        return Err(Error::InvalidArgument("prepared data: record count mismatch".into()));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        class_names: meta.info.class_names.clone(),
        split_seed: meta.info.split_seed,
    };
    for ((name, rec), entry) in records.into_iter().zip(meta.samples) {
        let ArchiveRecord::F32(image) = rec else {
            return Err(Error::InvalidArgument(format!("prepared image `{name}` must be f32")));
        };
        if name != entry.id || entry.label >= split.class_names.len() {
            return Err(Error::InvalidArgument(format!("prepared data: inconsistent entry `{name}`")));
        }
        let sample = Sample {
            image,
            label: entry.label,
            source_id: entry.id,
        };
        match entry.split {
            SplitKind::Train => split.train.push(sample),
            SplitKind::Validation => split.validation.push(sample),
            SplitKind::Test => split.test.push(sample),
        }
    }
    Ok((split, meta.info))
}

pub fn save_prepared(split: &DatasetSplit, info: &PreparedInfo, path: &Path) -> Result<()> {
    std::fs::write(path, prepared_to_bytes(split, info)?)?;
    Ok(())
}

pub fn load_prepared(path: &Path) -> Result<(DatasetSplit, PreparedInfo)> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read prepared data `{}`: {e}", path.display()))
    })?;
    prepared_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{generate_synthetic, split};

    #[test]
    fn round_trip() {
        let set = generate_synthetic(6, 2, 8, 1).unwrap();
        let sp = split(set.samples, &set.class_names, 3).unwrap();
        let info = PreparedInfo {
            image_size: (8, 8),
            background: "none".into(),
            split_seed: 3,
            class_names: sp.class_names.clone(),
        };
        let bytes = prepared_to_bytes(&sp, &info).unwrap();
        let (back, info2) = prepared_from_bytes(&bytes).unwrap();
        assert_eq!(back, sp);
        assert_eq!(info2, info);
        assert!(prepared_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
