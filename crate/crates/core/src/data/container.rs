//! Binary container for named float arrays.
//!
//! ```text
//! magic (4 bytes) | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON)
//! | payload_0 | payload_1 | ...
//! ```
//!
//! The header is a JSON list of `{name, dtype, shape}` objects in payload
//! order. Payloads are row-major little-endian and each starts at a file
//! offset that is a multiple of 64; the gaps are zero-filled. Entries may
//! carry an optional `attrs` object, which checkpoints use for metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"MBDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MBCK";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn all_finite(&self) -> bool {
        match self {
            ArrayData::F32(v) => v.iter().all(|x| x.is_finite()),
            ArrayData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| x.write_le(out)),
            ArrayData::F64(v) => v.iter().for_each(|x| x.write_le(out)),
        }
    }

    fn read(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => ArrayData::F32(bytes.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => ArrayData::F64(bytes.chunks_exact(8).map(f64::read_le).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "array `{name}`: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            data,
            attrs: BTreeMap::new(),
        })
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
            attrs: BTreeMap::new(),
        }
    }

    /// Integer ids stored as exact `f64` values.
    pub fn from_ids(name: impl Into<String>, ids: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: vec![ids.len()],
            data: ArrayData::F64(ids.iter().map(|&i| i as f64).collect()),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attrs(mut self, attrs: BTreeMap<String, serde_json::Value>) -> Self {
        self.attrs = attrs;
        self
    }

    /// Converts to a tensor of `T`, casting if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_ids(&self) -> Result<Vec<usize>> {
        let values: Vec<f64> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        };
        values
            .into_iter()
            .map(|x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 9.007_199_254_740_992e15 {
                    Ok(x as usize)
                } else {
                    Err(Error::config(format!("array `{}` holds non-id value {x}", self.name)))
                }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, serde_json::Value>,
}

fn padded(offset: usize) -> usize {
    offset.div_ceil(ALIGN) * ALIGN
}

pub fn encode(magic: [u8; 4], arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    for a in arrays {
        if !seen.insert(a.name.as_str()) {
            return Err(Error::config(format!("duplicate array name `{}`", a.name)));
        }
        if !a.data.all_finite() {
            return Err(Error::numerical(format!("array `{}` holds non-finite values", a.name)));
        }
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::dim(format!("array `{}` shape/data mismatch", a.name)));
        }
    }
    let header: Vec<HeaderEntry> = arrays
        .iter()
        .map(|a| HeaderEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            attrs: a.attrs.clone(),
        })
        .collect();
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(
        16 + header.len() + arrays.iter().map(|a| a.data.len() * 8 + ALIGN).sum::<usize>(),
    );
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in arrays {
        out.resize(padded(out.len()), 0);
        a.data.write(&mut out);
    }
    Ok(out)
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<Vec<NamedArray>> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "truncated preamble"));
    }
    if bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(8, format!("header length {header_len} exceeds file")))?
        as usize;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::format(16, format!("invalid header: {e}")))?;
    let mut offset = header_end;
    let mut arrays = Vec::with_capacity(header.len());
    let mut seen = BTreeSet::new();
    for entry in header {
        if !seen.insert(entry.name.clone()) {
            return Err(Error::format(16, format!("duplicate array name `{}`", entry.name)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(entry.dtype.size()))
            .ok_or_else(|| Error::format(16, format!("array `{}` is too large", entry.name)))?;
        let start = padded(offset);
        let end = start
            .checked_add(count)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::format(
                    start as u64,
                    format!("payload of `{}` truncated ({count} bytes expected)", entry.name),
                )
            })?;
        if bytes[offset.min(start)..start].iter().any(|&b| b != 0) {
            return Err(Error::format(offset as u64, "non-zero alignment padding"));
        }
        let data = ArrayData::read(entry.dtype, &bytes[start..end]);
        arrays.push(NamedArray {
            name: entry.name,
            shape: entry.shape,
            data,
            attrs: entry.attrs,
        });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(
            offset as u64,
            format!("{} trailing bytes", bytes.len() - offset),
        ));
    }
    Ok(arrays)
}

pub fn write_file(path: &Path, magic: [u8; 4], arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(magic, arrays)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<Vec<NamedArray>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

/// Writes a dataset (`MBDS`) container.
pub fn save_container(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    write_file(path.as_ref(), DATASET_MAGIC, arrays)
}

/// Reads a dataset (`MBDS`) container.
pub fn load_container(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    read_file(path.as_ref(), DATASET_MAGIC)
}

/// Lookup helper over a decoded container.
pub fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a NamedArray> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::config(format!("container has no array `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<NamedArray> {
        vec![
            NamedArray::new("a", vec![2, 3], ArrayData::F32(vec![1.0, -2.5, 3.0, 0.0, 1e-30, 7.0])).unwrap(),
            NamedArray::new("b/empty", vec![0, 4], ArrayData::F64(vec![])).unwrap(),
            NamedArray::new("c", vec![1], ArrayData::F64(vec![std::f64::consts::PI])).unwrap(),
        ]
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = encode(DATASET_MAGIC, &sample()).unwrap();
        assert_eq!(&bytes[..4], b"MBDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = padded(16 + header_len);
        assert_eq!(first % 64, 0);
        assert_eq!(f32::from_le_bytes(bytes[first..first + 4].try_into().unwrap()), 1.0);
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header[0]["dtype"], "f32");
        assert_eq!(header[1]["shape"], serde_json::json!([0, 4]));
    }

    #[test]
    fn round_trip_including_empty_array() {
        let arrays = sample();
        let back = decode(DATASET_MAGIC, &encode(DATASET_MAGIC, &arrays).unwrap()).unwrap();
        assert_eq!(back, arrays);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = encode(DATASET_MAGIC, &sample()).unwrap();
        bytes[1] ^= 0xff;
        match decode(DATASET_MAGIC, &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let ok = encode(CHECKPOINT_MAGIC, &sample()).unwrap();
        assert!(decode(DATASET_MAGIC, &ok).is_err());
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(DATASET_MAGIC, &sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode(DATASET_MAGIC, cut) {
            Err(Error::Format { offset, reason }) => {
                assert!(offset > 16);
                assert!(reason.contains("`c`"), "{reason}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_non_finite() {
        let mut arrays = sample();
        arrays.push(arrays[0].clone());
        assert!(encode(DATASET_MAGIC, &arrays).is_err());
        let bad = NamedArray::new("x", vec![1], ArrayData::F32(vec![f32::NAN])).unwrap();
        assert!(encode(DATASET_MAGIC, &[bad]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip_bit_exact(
            rows in 0usize..5,
            cols in 0usize..7,
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n = rows * cols;
            let vals: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x3fef_ffff_ffff_ffff))
                .collect();
            let data = if wide {
                ArrayData::F64(vals)
            } else {
                ArrayData::F32(vals.iter().map(|&v| v as f32).collect())
            };
            let arrays = vec![NamedArray::new("x", vec![rows, cols], data).unwrap()];
            let bytes = encode(DATASET_MAGIC, &arrays).unwrap();
            let back = decode(DATASET_MAGIC, &bytes).unwrap();
            prop_assert_eq!(encode(DATASET_MAGIC, &back).unwrap(), bytes);
        }
    }
}
