//! Flat tensor archive: an 8-byte little-endian header length, a UTF-8 JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! little-endian tensor bytes. The layout is the common open "safetensors"
//! convention, so archives written here load in external tooling.
//!
//! Int4 tensors are stored as an `I4` entry (two codes per byte, low nibble
//! first) plus companion `F32` entries `<name>.__scales` / `<name>.__zeros`
//! (and optionally `<name>.__channel_scales`), with the quantization layout in
//! the `__int4__.<name>` metadata key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::QuantizedTensor;

const METADATA_KEY: &str = "__metadata__";
const INT4_META_PREFIX: &str = "__int4__.";
const SCALES_SUFFIX: &str = ".__scales";
const ZEROS_SUFFIX: &str = ".__zeros";
const CHANNEL_SCALES_SUFFIX: &str = ".__channel_scales";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data section: header declares {expected} bytes, file holds {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("overlapping byte ranges for tensors `{first}` and `{second}`")]
    OverlappingOffsets { first: String, second: String },
    #[error("unknown dtype `{dtype}` for tensor `{name}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes but range spans {actual}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}` has {actual} elements, shape {shape:?} requires {expected}")]
    ElementCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{0}` has a zero-length dimension")]
    ZeroDimension(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingData(usize),
    #[error("name `{0}` uses a reserved suffix or prefix")]
    ReservedName(String),
    #[error("int4 tensor `{name}`: {reason}")]
    InvalidInt4 { name: String, reason: String },
}

pub type Result<T, E = ArchiveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    I4,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::I4 => "I4",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "I4" => Some(DType::I4),
            _ => None,
        }
    }

    /// Serialized byte size for `numel` elements.
    fn byte_len(self, numel: usize) -> usize {
        match self {
            DType::F32 => numel * 4,
            DType::F16 => numel * 2,
            DType::I4 => numel.div_ceil(2),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element storage. `F16` values are held upcast to f32; every value in it is
/// exactly representable in half precision, so write-back is lossless.
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F16(Vec<f32>),
    Int4(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_count("<new>", &shape, data.len())?;
        Ok(Self {
            shape,
            storage: Storage::F32(data),
        })
    }

    /// Builds a half-precision tensor; values are rounded to the nearest f16.
    pub fn f16(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_count("<new>", &shape, data.len())?;
        let data = data
            .into_iter()
            .map(|v| f16::from_f32(v).to_f32())
            .collect();
        Ok(Self {
            shape,
            storage: Storage::F16(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            storage: Storage::F32(vec![0.0; n]),
        }
    }

    pub fn int4(q: QuantizedTensor) -> Self {
        Self {
            shape: q.padded_shape().to_vec(),
            storage: Storage::Int4(q),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
            Storage::Int4(_) => DType::I4,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Float values, or `None` for int4 tensors.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) | Storage::F16(v) => Some(v),
            Storage::Int4(_) => None,
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedTensor> {
        match &self.storage {
            Storage::Int4(q) => Some(q),
            _ => None,
        }
    }

    /// Float values for arithmetic; int4 tensors are dequantized.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) | Storage::F16(v) => v.clone(),
            Storage::Int4(q) => q.dequantize(),
        }
    }

    /// Replaces the float contents, keeping the storage dtype (f16 values get
    /// rounded again on the way in).
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        match self.dtype() {
            DType::F16 => Tensor::f16(self.shape.clone(), values),
            _ => Tensor::f32(self.shape.clone(), values),
        }
    }

    /// Dimensions as `(rows, cols)` for a rank-2 tensor.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// Equality on raw bits, so NaN payloads and signed zeros count.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::F32(a), Storage::F32(b)) | (Storage::F16(a), Storage::F16(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::Int4(a), Storage::Int4(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}

fn check_count(name: &str, shape: &[usize], actual: usize) -> Result<()> {
    let expected = numel(shape);
    if expected != actual {
        return Err(ArchiveError::ElementCount {
            name: name.to_string(),
            shape: shape.to_vec(),
            expected,
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Int4Layout {
    group_size: usize,
    original_shape: Vec<usize>,
    symmetric: bool,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bitwise_eq(&self, other: &TensorArchive) -> bool {
        self.metadata == other.metadata
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bitwise_eq(t2))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for key in self.metadata.keys() {
            if key.starts_with(INT4_META_PREFIX) {
                return Err(ArchiveError::ReservedName(key.clone()));
            }
        }

        // Flatten into (name, dtype, shape, bytes) records in name order.
        let mut records: BTreeMap<String, (DType, Vec<usize>, Vec<u8>)> = BTreeMap::new();
        let mut metadata = self.metadata.clone();
        for (name, tensor) in &self.entries {
            if is_reserved(name) {
                return Err(ArchiveError::ReservedName(name.clone()));
            }
            if tensor.shape.contains(&0) {
                return Err(ArchiveError::ZeroDimension(name.clone()));
            }
            match &tensor.storage {
                Storage::F32(v) => {
                    records.insert(name.clone(), (DType::F32, tensor.shape.clone(), f32_bytes(v)));
                }
                Storage::F16(v) => {
                    let bytes = v
                        .iter()
                        .flat_map(|x| f16::from_f32(*x).to_le_bytes())
                        .collect();
                    records.insert(name.clone(), (DType::F16, tensor.shape.clone(), bytes));
                }
                Storage::Int4(q) => {
                    q.validate().map_err(|e| ArchiveError::InvalidInt4 {
                        name: name.clone(),
                        reason: e.to_string(),
                    })?;
                    let table_shape = q.group_table_shape();
                    records.insert(
                        name.clone(),
                        (DType::I4, tensor.shape.clone(), q.packed().to_vec()),
                    );
                    records.insert(
                        format!("{name}{SCALES_SUFFIX}"),
                        (DType::F32, table_shape.clone(), f32_bytes(q.scales())),
                    );
                    records.insert(
                        format!("{name}{ZEROS_SUFFIX}"),
                        (DType::F32, table_shape, f32_bytes(q.zeros())),
                    );
                    if let Some(cs) = q.channel_scales() {
                        records.insert(
                            format!("{name}{CHANNEL_SCALES_SUFFIX}"),
                            (DType::F32, vec![cs.len()], f32_bytes(cs)),
                        );
                    }
                    let layout = Int4Layout {
                        group_size: q.group_size(),
                        original_shape: q.original_shape().to_vec(),
                        symmetric: q.symmetric(),
                    };
                    metadata.insert(
                        format!("{INT4_META_PREFIX}{name}"),
                        serde_json::to_string(&layout).expect("layout serializes"),
                    );
                }
            }
        }

        let mut header = serde_json::Map::new();
        if !metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0usize;
        for (name, (dtype, shape, bytes)) in &records {
            let entry = HeaderEntry {
                dtype: dtype.as_str().to_string(),
                shape: shape.clone(),
                data_offsets: [offset, offset + bytes.len()],
            };
            offset += bytes.len();
            header.insert(
                name.clone(),
                serde_json::to_value(entry).expect("header entry serializes"),
            );
        }

        let mut header_bytes =
            serde_json::to_vec(&serde_json::Value::Object(header)).expect("header serializes");
        let pad = (HEADER_ALIGN - header_bytes.len() % HEADER_ALIGN) % HEADER_ALIGN;
        header_bytes.extend(std::iter::repeat_n(b' ', pad));

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, _, bytes) in records.values() {
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(ArchiveError::MalformedHeader(
                "file shorter than the 8-byte length prefix".into(),
            ));
        }
        let header_len = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|n| *n <= buf.len() - 8)
            .ok_or_else(|| {
                ArchiveError::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    buf.len()
                ))
            })?;
        let header_text = std::str::from_utf8(&buf[8..8 + header_len])
            .map_err(|e| ArchiveError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: serde_json::Map<String, serde_json::Value> = serde_json::from_str(header_text)
            .map_err(|e| ArchiveError::MalformedHeader(format!("header is not a JSON object: {e}")))?;
        let data = &buf[8 + header_len..];

        let mut metadata: BTreeMap<String, String> = BTreeMap::new();
        let mut raw: Vec<(String, DType, Vec<usize>, [usize; 2])> = Vec::new();
        for (key, value) in header {
            if key == METADATA_KEY {
                metadata = serde_json::from_value(value).map_err(|e| {
                    ArchiveError::MalformedHeader(format!("metadata must map strings to strings: {e}"))
                })?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| ArchiveError::MalformedHeader(format!("entry `{key}`: {e}")))?;
            let dtype = DType::parse(&entry.dtype).ok_or_else(|| ArchiveError::UnknownDtype {
                name: key.clone(),
                dtype: entry.dtype.clone(),
            })?;
            let [start, end] = entry.data_offsets;
            if end < start {
                return Err(ArchiveError::MalformedHeader(format!(
                    "entry `{key}` has a reversed byte range"
                )));
            }
            if entry.shape.contains(&0) {
                return Err(ArchiveError::ZeroDimension(key));
            }
            let expected = dtype.byte_len(numel(&entry.shape));
            if end - start != expected {
                return Err(ArchiveError::SizeMismatch {
                    name: key,
                    shape: entry.shape,
                    expected,
                    actual: end - start,
                });
            }
            raw.push((key, dtype, entry.shape, entry.data_offsets));
        }

        // Byte ranges must tile the data section exactly.
        raw.sort_by(|a, b| a.3.cmp(&b.3).then_with(|| a.0.cmp(&b.0)));
        let mut cursor = 0usize;
        let mut prev_name: Option<&str> = None;
        for (name, _, _, [start, end]) in &raw {
            if *start < cursor {
                return Err(ArchiveError::OverlappingOffsets {
                    first: prev_name.unwrap_or_default().to_string(),
                    second: name.clone(),
                });
            }
            if *start > cursor {
                return Err(ArchiveError::MalformedHeader(format!(
                    "gap before tensor `{name}` (bytes {cursor}..{start} unclaimed)"
                )));
            }
            cursor = *end;
            prev_name = Some(name);
        }
        if data.len() < cursor {
            return Err(ArchiveError::TruncatedData {
                expected: cursor,
                actual: data.len(),
            });
        }
        if data.len() > cursor {
            return Err(ArchiveError::TrailingData(data.len() - cursor));
        }

        let mut floats: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut packed: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        for (name, dtype, shape, [start, end]) in raw {
            let bytes = &data[start..end];
            match dtype {
                DType::F32 => {
                    let values = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    floats.insert(name, Tensor { shape, storage: Storage::F32(values) });
                }
                DType::F16 => {
                    let values = bytes
                        .chunks_exact(2)
                        .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                        .collect();
                    floats.insert(name, Tensor { shape, storage: Storage::F16(values) });
                }
                DType::I4 => {
                    packed.insert(name, (shape, bytes.to_vec()));
                }
            }
        }

        let mut entries = BTreeMap::new();
        for (name, (shape, bytes)) in packed {
            let layout_key = format!("{INT4_META_PREFIX}{name}");
            let invalid = |reason: String| ArchiveError::InvalidInt4 {
                name: name.clone(),
                reason,
            };
            let layout: Int4Layout = metadata
                .remove(&layout_key)
                .ok_or_else(|| invalid("missing layout metadata".into()))
                .and_then(|s| {
                    serde_json::from_str(&s).map_err(|e| invalid(format!("bad layout metadata: {e}")))
                })?;
            let mut take = |suffix: &str| -> Option<Vec<f32>> {
                floats
                    .remove(&format!("{name}{suffix}"))
                    .and_then(|t| t.as_f32().map(<[f32]>::to_vec))
            };
            let scales = take(SCALES_SUFFIX).ok_or_else(|| invalid("missing scale table".into()))?;
            let zeros = take(ZEROS_SUFFIX).ok_or_else(|| invalid("missing zero table".into()))?;
            let channel_scales = take(CHANNEL_SCALES_SUFFIX);
            let q = QuantizedTensor::from_parts(
                bytes,
                scales,
                zeros,
                layout.original_shape,
                shape,
                layout.group_size,
                layout.symmetric,
                channel_scales,
            )
            .map_err(|e| invalid(e.to_string()))?;
            entries.insert(name, Tensor::int4(q));
        }
        for (name, tensor) in floats {
            if is_reserved(&name) {
                return Err(ArchiveError::MalformedHeader(format!(
                    "companion table `{name}` has no int4 owner"
                )));
            }
            entries.insert(name, tensor);
        }
        if let Some(stray) = metadata.keys().find(|k| k.starts_with(INT4_META_PREFIX)) {
            return Err(ArchiveError::MalformedHeader(format!(
                "layout metadata `{stray}` has no int4 tensor"
            )));
        }

        Ok(Self { entries, metadata })
    }
}

fn is_reserved(name: &str) -> bool {
    name == METADATA_KEY
        || name.ends_with(SCALES_SUFFIX)
        || name.ends_with(ZEROS_SUFFIX)
        || name.ends_with(CHANNEL_SCALES_SUFFIX)
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorArchive::from_bytes(&buf)
}

pub fn write_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = archive.to_bytes()?;
    fs::write(path, bytes).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}
