//! Binary containers for tensor batches and representations.
//!
//! Both formats share one layout:
//!
//! ```text
//! magic (4 bytes) | version (u16 LE) | header length (u32 LE) | JSON header | f64 LE payload
//! ```
//!
//! Headers are compact JSON with sorted keys, so equal inputs give equal
//! bytes. Tensor payloads are first-index-fastest. Files are written to a
//! temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bht::HtRepresentation;
use crate::error::{HtError, Result};
use crate::metrics::NormalizationParams;
use crate::tensor::DenseTensor;
use crate::tree::{DimensionTree, IndexSet, Ranks, TreeNode};

pub const BATCH_MAGIC: &[u8; 4] = b"BHTB";
pub const STATE_MAGIC: &[u8; 4] = b"HTRS";
pub const FORMAT_VERSION: u16 = 1;

const PREFIX_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchHeader {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationParams>,
}

/// A batch file's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFile {
    pub tensor: DenseTensor,
    pub normalization: Option<NormalizationParams>,
}

/// Normalization applied to one streamed batch, covering accumulated
/// tensors `first .. first + count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    /// File name of the batch, used to check that a resumed run replays the
    /// same stream.
    pub source: String,
    pub first: usize,
    pub count: usize,
    pub params: NormalizationParams,
}

/// A representation together with its normalization ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredState {
    pub representation: HtRepresentation,
    pub ledger: Vec<UnitRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeHeader {
    order: usize,
    layers: Vec<Vec<TreeNode>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    tree: TreeHeader,
    extents: Vec<usize>,
    ranks: Ranks,
    index_sets: IndexSet,
    accumulated: usize,
    epsilon_rel: f64,
    /// Core shapes in layer-major, position-minor order.
    core_shapes: Vec<Vec<usize>>,
    ledger: Vec<UnitRecord>,
}

fn canonical_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    // serde_json maps are ordered by key, so routing through Value sorts
    // struct fields as well.
    let v: Value = serde_json::to_value(value).map_err(|e| HtError::Format(e.to_string()))?;
    serde_json::to_vec(&v).map_err(|e| HtError::Format(e.to_string()))
}

fn assemble(magic: &[u8; 4], header: &[u8], payload: &[&[f64]]) -> Result<Vec<u8>> {
    let header_len =
        u32::try_from(header.len()).map_err(|_| HtError::Format("header too large".into()))?;
    let floats: usize = payload.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * floats);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header);
    for part in payload {
        for v in *part {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its JSON header and payload bytes.
fn disassemble<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < PREFIX_LEN {
        return Err(HtError::TruncatedPayload {
            expected: PREFIX_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(HtError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION || version == 0 {
        return Err(HtError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[PREFIX_LEN..];
    if body.len() < header_len {
        return Err(HtError::TruncatedPayload {
            expected: PREFIX_LEN + header_len,
            found: bytes.len(),
        });
    }
    Ok(body.split_at(header_len))
}

fn parse_header<T: for<'de> Deserialize<'de>>(header: &[u8]) -> Result<T> {
    serde_json::from_slice(header).map_err(|e| HtError::Format(format!("header: {e}")))
}

fn read_floats(payload: &[u8], expected: usize, total_len: usize) -> Result<Vec<f64>> {
    if payload.len() != 8 * expected {
        let header_part = total_len - payload.len();
        return Err(HtError::TruncatedPayload {
            expected: header_part + 8 * expected,
            found: total_len,
        });
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Atomically replaces `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HtError::Io(e.error))?;
    Ok(())
}

pub fn encode_batch(t: &DenseTensor, normalization: Option<&NormalizationParams>) -> Result<Vec<u8>> {
    let header = BatchHeader {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
        layout: "first-fastest".into(),
        normalization: normalization.cloned(),
    };
    assemble(BATCH_MAGIC, &canonical_json(&header)?, &[t.data()])
}

pub fn decode_batch(bytes: &[u8]) -> Result<BatchFile> {
    let (header, payload) = disassemble(BATCH_MAGIC, bytes)?;
    let header: BatchHeader = parse_header(header)?;
    if header.dtype != "f64" || header.layout != "first-fastest" {
        return Err(HtError::Format(format!(
            "unsupported element type {:?} or layout {:?}",
            header.dtype, header.layout
        )));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(HtError::Format(format!("invalid shape {:?}", header.shape)));
    }
    let len = header
        .shape
        .iter()
        .try_fold(1usize, |a, &n| a.checked_mul(n))
        .ok_or_else(|| HtError::Format("shape overflows".into()))?;
    let data = read_floats(payload, len, bytes.len())?;
    Ok(BatchFile {
        tensor: DenseTensor::new(header.shape, data)?,
        normalization: header.normalization,
    })
}

pub fn write_batch(t: &DenseTensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_batch(t, None)?)
}

pub fn write_batch_with(
    t: &DenseTensor,
    normalization: Option<&NormalizationParams>,
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_batch(t, normalization)?)
}

pub fn read_batch_file(path: &Path) -> Result<BatchFile> {
    decode_batch(&fs::read(path)?)
}

pub fn read_batch(path: &Path) -> Result<DenseTensor> {
    Ok(read_batch_file(path)?.tensor)
}

pub fn encode_representation(h: &HtRepresentation, ledger: &[UnitRecord]) -> Result<Vec<u8>> {
    let header = StateHeader {
        tree: TreeHeader {
            order: h.tree().order(),
            layers: h.tree().layers().to_vec(),
        },
        extents: h.extents().to_vec(),
        ranks: h.ranks().clone(),
        index_sets: h.index_sets().clone(),
        accumulated: h.accumulated(),
        epsilon_rel: h.epsilon_rel(),
        core_shapes: h.cores().iter().flatten().map(|c| c.shape().to_vec()).collect(),
        ledger: ledger.to_vec(),
    };
    let payload: Vec<&[f64]> = h.cores().iter().flatten().map(DenseTensor::data).collect();
    assemble(STATE_MAGIC, &canonical_json(&header)?, &payload)
}

pub fn decode_representation(bytes: &[u8]) -> Result<StoredState> {
    let (header, payload) = disassemble(STATE_MAGIC, bytes)?;
    let header: StateHeader = parse_header(header)?;
    let tree = DimensionTree::new(header.tree.order, header.tree.layers)?;
    if header.core_shapes.len() != tree.node_count() {
        return Err(HtError::Format(format!(
            "{} core shapes for {} nodes",
            header.core_shapes.len(),
            tree.node_count()
        )));
    }
    let total = header
        .core_shapes
        .iter()
        .try_fold(0usize, |acc, s| {
            s.iter()
                .try_fold(1usize, |a, &n| a.checked_mul(n))
                .and_then(|len| acc.checked_add(len))
        })
        .ok_or_else(|| HtError::Format("core shapes overflow".into()))?;
    let data = read_floats(payload, total, bytes.len())?;

    let mut cores = Vec::with_capacity(tree.layers().len());
    let mut shapes = header.core_shapes.into_iter();
    let mut offset = 0;
    for layer in tree.layers() {
        let mut row = Vec::with_capacity(layer.len());
        for _ in layer {
            let shape = shapes.next().expect("count checked");
            let len: usize = shape.iter().product();
            row.push(DenseTensor::new(shape, data[offset..offset + len].to_vec())?);
            offset += len;
        }
        cores.push(row);
    }
    let h = HtRepresentation::from_parts(tree, header.extents, cores, header.epsilon_rel)?;
    if h.ranks() != &header.ranks
        || h.index_sets() != &header.index_sets
        || h.accumulated() != header.accumulated
    {
        return Err(HtError::Format(
            "declared ranks, index sets or count disagree with the cores".into(),
        ));
    }
    let covered: usize = header.ledger.iter().map(|u| u.count).sum();
    let contiguous = header
        .ledger
        .iter()
        .scan(0, |next, u| {
            let ok = u.first == *next;
            *next += u.count;
            Some(ok)
        })
        .all(|ok| ok);
    if !header.ledger.is_empty() && (covered != h.accumulated() || !contiguous) {
        return Err(HtError::Format(
            "normalization ledger does not cover the accumulation".into(),
        ));
    }
    Ok(StoredState {
        representation: h,
        ledger: header.ledger,
    })
}

pub fn write_representation(h: &HtRepresentation, ledger: &[UnitRecord], path: &Path) -> Result<()> {
    write_atomic(path, &encode_representation(h, ledger)?)
}

pub fn read_representation(path: &Path) -> Result<StoredState> {
    decode_representation(&fs::read(path)?)
}
