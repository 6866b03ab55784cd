//! The `LIONWT01` weight-file container.
//!
//! Layout, in order:
//!
//! ```text
//! [0..8)    magic "LIONWT01" (6-byte format tag + 2-digit version)
//! [8..12)   u32 LE header byte length
//! [..]      UTF-8 JSON header: sections, each listing tensors
//!           {name, shape, dtype in {"f32","f64"}, byte_offset, byte_len}
//! [..]      raw little-endian tensor payloads, offsets relative to
//!           the end of the header
//! [-4..]    CRC32 over every byte between the magic and this checksum
//! ```
//!
//! The same container stores model checkpoints, adapters, scaling embedders,
//! and rendered clips — they differ only in section names and metadata. The
//! checksum is verified before the header is parsed, so a corrupted byte
//! anywhere fails as [`LionError::ChecksumMismatch`] with nothing loaded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LionError, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC_TAG: &[u8; 6] = b"LIONWT";
const VERSION_TAG: &[u8; 2] = b"01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    sections: Vec<SectionHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: usize,
    byte_len: usize,
}

/// Incrementally builds a weight file: open a section, add tensors, write.
#[derive(Default)]
pub struct FileBuilder {
    sections: Vec<SectionHeader>,
    payload: Vec<u8>,
}

impl FileBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start a new section; subsequent tensors land in it.
    pub fn begin_section(&mut self, name: &str, meta: serde_json::Value) -> &mut Self {
        self.sections.push(SectionHeader { name: name.to_string(), meta, tensors: Vec::new() });
        self
    }

    /// Append a tensor to the current section.
    pub fn add_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> &mut Self {
        let section = self.sections.last_mut().expect("begin_section before add_tensor");
        let byte_offset = self.payload.len();
        for &v in t.data() {
            self.payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        section.tensors.push(TensorHeader {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset,
            byte_len: self.payload.len() - byte_offset,
        });
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { sections: self.sections_cloned() })?;
        let mut body = Vec::with_capacity(4 + header.len() + self.payload.len());
        body.extend_from_slice(&(header.len() as u32).to_le_bytes());
        body.extend_from_slice(&header);
        body.extend_from_slice(&self.payload);

        let mut out = Vec::with_capacity(8 + body.len() + 4);
        out.extend_from_slice(MAGIC_TAG);
        out.extend_from_slice(VERSION_TAG);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    fn sections_cloned(&self) -> Vec<SectionHeader> {
        self.sections
            .iter()
            .map(|s| SectionHeader {
                name: s.name.clone(),
                meta: s.meta.clone(),
                tensors: s
                    .tensors
                    .iter()
                    .map(|t| TensorHeader {
                        name: t.name.clone(),
                        shape: t.shape.clone(),
                        dtype: t.dtype,
                        byte_offset: t.byte_offset,
                        byte_len: t.byte_len,
                    })
                    .collect(),
            })
            .collect()
    }
}

/// A parsed, checksum-verified weight file held in memory.
pub struct WeightFile {
    sections: BTreeMap<String, Section>,
}

pub struct Section {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, (TensorHeader, Vec<u8>)>,
    order: Vec<String>,
}

impl WeightFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(LionError::Truncated(format!("{} bytes is below the minimum", bytes.len())));
        }
        if &bytes[0..6] != MAGIC_TAG {
            return Err(LionError::MagicMismatch {
                expected: String::from_utf8_lossy(MAGIC_TAG).into_owned(),
                found: String::from_utf8_lossy(&bytes[0..6]).into_owned(),
            });
        }
        if &bytes[6..8] != VERSION_TAG {
            return Err(LionError::VersionMismatch {
                expected: String::from_utf8_lossy(VERSION_TAG).into_owned(),
                found: String::from_utf8_lossy(&bytes[6..8]).into_owned(),
            });
        }

        // Checksum first: nothing is interpreted from a corrupt body.
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(LionError::ChecksumMismatch { stored, computed });
        }

        let header_len = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
        if 4 + header_len > body.len() {
            return Err(LionError::Truncated(format!(
                "declared header length {} exceeds body",
                header_len
            )));
        }
        let header: Header = serde_json::from_slice(&body[4..4 + header_len])
            .map_err(|e| LionError::HeaderParse(e.to_string()))?;
        let payload = &body[4 + header_len..];

        let mut sections = BTreeMap::new();
        for sh in header.sections {
            let mut tensors = BTreeMap::new();
            let mut order = Vec::new();
            for th in sh.tensors {
                let end = th.byte_offset.checked_add(th.byte_len).ok_or_else(|| {
                    LionError::HeaderParse(format!("tensor {} offset overflow", th.name))
                })?;
                if end > payload.len() {
                    return Err(LionError::Truncated(format!(
                        "tensor {} extends past payload",
                        th.name
                    )));
                }
                let expect: usize =
                    th.shape.iter().product::<usize>() * th.dtype.size_bytes();
                if expect != th.byte_len {
                    return Err(LionError::HeaderParse(format!(
                        "tensor {} declares {} bytes for shape {:?} {:?}",
                        th.name, th.byte_len, th.shape, th.dtype
                    )));
                }
                let data = payload[th.byte_offset..end].to_vec();
                order.push(th.name.clone());
                tensors.insert(th.name.clone(), (th, data));
            }
            sections.insert(sh.name.clone(), Section { meta: sh.meta, tensors, order });
        }
        Ok(WeightFile { sections })
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .get(name)
            .ok_or_else(|| LionError::MissingEntry(format!("section {name:?}")))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }
}

impl Section {
    /// Tensor names in file order.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn dtype_of(&self, name: &str) -> Result<Dtype> {
        self.entry(name).map(|(h, _)| h.dtype)
    }

    /// Decode a tensor; the stored dtype must match `T`, conversions are the
    /// caller's explicit business.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (h, data) = self.entry(name)?;
        if h.dtype != T::DTYPE {
            return Err(LionError::Config(format!(
                "tensor {name:?} stored as {:?}, requested {:?}",
                h.dtype,
                T::DTYPE
            )));
        }
        let width = h.dtype.size_bytes();
        let values = data.chunks_exact(width).map(T::from_le_slice).collect();
        Tensor::from_vec(h.shape.clone(), values)
    }

    fn entry(&self, name: &str) -> Result<&(TensorHeader, Vec<u8>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| LionError::MissingEntry(format!("tensor {name:?}")))
    }
}

/// CRC32 of a whole file, for dataset manifests.
pub fn crc32_of_file(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_bytes() -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f32>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![2, 2], 1.0, &mut rng);
        let mut fb = FileBuilder::new();
        fb.begin_section("adapter/demo", serde_json::json!({"rank": 2}));
        fb.add_tensor("blk0.q.a", &a);
        fb.add_tensor("blk0.q.b", &b);
        fb.to_bytes().unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f32>::randn(vec![3, 4], 1.0, &mut rng);
        let bytes = {
            let mut fb = FileBuilder::new();
            fb.begin_section("s", serde_json::Value::Null);
            fb.add_tensor("t", &a);
            fb.to_bytes().unwrap()
        };
        let wf = WeightFile::from_bytes(&bytes).unwrap();
        let back: Tensor<f32> = wf.section("s").unwrap().tensor("t").unwrap();
        assert_eq!(back.shape(), a.shape());
        assert!(back
            .data()
            .iter()
            .zip(a.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identical_content_produces_identical_bytes() {
        assert_eq!(sample_bytes(), sample_bytes());
    }

    #[test]
    fn corrupted_header_byte_is_a_checksum_error() {
        let mut bytes = sample_bytes();
        bytes[14] ^= 0x40; // inside the JSON header
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(LionError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_payload_byte_is_a_checksum_error() {
        let mut bytes = sample_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(LionError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_distinct_errors() {
        let mut bytes = sample_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(LionError::MagicMismatch { .. })
        ));

        let mut bytes = sample_bytes();
        bytes[7] = b'9';
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(LionError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample_bytes();
        assert!(matches!(
            WeightFile::from_bytes(&bytes[..10]),
            Err(LionError::Truncated(_))
        ));
    }

    #[test]
    fn missing_entries_are_named() {
        let wf = WeightFile::from_bytes(&sample_bytes()).unwrap();
        assert!(matches!(wf.section("nope"), Err(LionError::MissingEntry(_))));
        let s = wf.section("adapter/demo").unwrap();
        assert!(matches!(s.tensor::<f32>("nope"), Err(LionError::MissingEntry(_))));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let wf = WeightFile::from_bytes(&sample_bytes()).unwrap();
        let s = wf.section("adapter/demo").unwrap();
        assert!(s.tensor::<f64>("blk0.q.a").is_err());
        assert!(s.tensor::<f32>("blk0.q.b").is_err());
    }
}
