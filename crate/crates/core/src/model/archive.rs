//! Little-endian named-tensor container.
//!
//! Layout: magic `SXN1`, `u32` format version, `u32` record count, then per
//! record `u32` name length, UTF-8 name, `u8` dtype tag, `u32` rank, `u64`
//! extents, raw little-endian data; finally a `u64`-length-prefixed metadata
//! block.

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const ARCHIVE_MAGIC: [u8; 4] = *b"SXN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArchiveRecord {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn write_archive(records: &[(String, ArchiveRecord)], metadata: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, rec) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match rec {
            ArchiveRecord::F32(t) => put_tensor(&mut out, t),
            ArchiveRecord::F64(t) => put_tensor(&mut out, t),
        }
    }
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Element>(&mut self, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(n.saturating_mul(size), name)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))
    }
}

pub fn read_archive(bytes: &[u8]) -> Result<(Vec<(String, ArchiveRecord)>, Vec<u8>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}, expected {ARCHIVE_MAGIC:?}"
        )));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let rec = match dtype {
            DType::F32 => ArchiveRecord::F32(r.tensor(shape, &name)?),
            DType::F64 => ArchiveRecord::F64(r.tensor(shape, &name)?),
        };
        records.push((name, rec));
    }
    let meta_len = r.u64("metadata length")? as usize;
    let metadata = r.take(meta_len, "metadata")?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((records, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let recs = vec![
            (
                "a".to_string(),
                ArchiveRecord::F32(Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap()),
            ),
            ("b".to_string(), ArchiveRecord::F64(Tensor::scalar(std::f64::consts::PI))),
        ];
        write_archive(&recs, b"{\"k\":1}")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let (recs, meta) = read_archive(&bytes).unwrap();
        assert_eq!(meta, b"{\"k\":1}");
        assert_eq!(write_archive(&recs, &meta), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(read_archive(&bytes).unwrap_err().to_string().contains("magic"));

        let mut bytes = sample();
        bytes[4] = 9;
        assert!(read_archive(&bytes).unwrap_err().to_string().contains("version"));

        let bytes = sample();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = read_archive(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{cut}: {err}");
        }
    }
}
