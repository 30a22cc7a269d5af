//! On-disk formats shared with external model pipelines.
//!
//! # Tensor blobs
//!
//! All integers and floats are little-endian regardless of host.
//!
//! ```text
//! offset  size        field
//! 0       4           magic: DPEM | DPLT | DPAT | DPLG | DPRM
//! 4       4   u32     version (1)
//! 8       4   u32     ndims (>= 1)
//! 12      4·ndims u32 dims, outermost first
//! ..      8   u64     payload length in bytes (= product(dims) · 4)
//! ..      ..  f32     payload, row-major
//! ```
//!
//! A one-element blob is therefore 28 bytes. Non-finite payload values are
//! rejected on both write and read.
//!
//! # JSON documents
//!
//! Masks ([`MaskFile`]) and decoder trace manifests ([`TraceManifest`]) are
//! JSON, schema version 1. Manifest file references are resolved relative to
//! the manifest's directory.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctp::DecoderTrace;
use crate::mask::{Stage, TokenMask};
use crate::qtp::{EmbeddingMatrix, RelevanceMap};

pub const FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;
const MAX_DIMS: u32 = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: bad magic {found:?}, expected {expected}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported version {found}")]
    Version { path: String, found: u32 },
    #[error("{path}: malformed header: {reason}")]
    Header { path: String, reason: String },
    #[error("{path}: file ends early: {reason}")]
    ShortRead { path: String, reason: String },
    #[error("{path}: non-finite value at element {index}")]
    NonFinite { path: String, index: usize },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: geometry mismatch: {reason}")]
    Geometry { path: String, reason: String },
    #[error("{path}: {source}")]
    Invalid { path: String, source: crate::Error },
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn io_err(path: &Path, source: io::Error) -> FormatError {
    if source.kind() == io::ErrorKind::NotFound {
        FormatError::NotFound(show(path))
    } else {
        FormatError::Io {
            path: show(path),
            source,
        }
    }
}

/// Write `bytes` to a temporary file beside `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.flush().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlobKind {
    Embeddings,
    LayerHidden,
    Attention,
    Logits,
    RelevanceMap,
}

impl BlobKind {
    pub const ALL: [BlobKind; 5] = [
        BlobKind::Embeddings,
        BlobKind::LayerHidden,
        BlobKind::Attention,
        BlobKind::Logits,
        BlobKind::RelevanceMap,
    ];

    pub fn magic(self) -> [u8; 4] {
        *match self {
            BlobKind::Embeddings => b"DPEM",
            BlobKind::LayerHidden => b"DPLT",
            BlobKind::Attention => b"DPAT",
            BlobKind::Logits => b"DPLG",
            BlobKind::RelevanceMap => b"DPRM",
        }
    }

    pub fn from_magic(magic: [u8; 4]) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.magic() == magic)
    }
}

/// A typed f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub kind: BlobKind,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn new(kind: BlobKind, dims: Vec<u32>, data: Vec<f32>) -> Self {
        Self { kind, dims, data }
    }

    fn element_count(dims: &[u32]) -> Option<u64> {
        dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
    }

    pub fn encode(&self) -> Result<Vec<u8>, String> {
        if self.dims.is_empty() || self.dims.len() > MAX_DIMS as usize {
            return Err(format!("{} dims (expected 1..={MAX_DIMS})", self.dims.len()));
        }
        let count = Self::element_count(&self.dims).ok_or("dims overflow")?;
        if count != self.data.len() as u64 {
            return Err(format!("dims {:?} hold {count} values, data has {}", self.dims, self.data.len()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite value at element {i}"));
        }
        let mut out = Vec::with_capacity(24 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&self.kind.magic());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(count * 4).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

pub fn write_blob(path: impl AsRef<Path>, blob: &Blob) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = blob.encode().map_err(|reason| FormatError::Header {
        path: show(path),
        reason,
    })?;
    write_atomic(path, &bytes)
}

fn read_u32(r: &mut impl Read, path: &Path, field: &str) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, field)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, field: &str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::ShortRead {
            path: show(path),
            reason: format!("while reading {field}"),
        },
        _ => io_err(path, e),
    })
}

/// Read any blob, validating the header against the file size before the
/// payload is allocated.
pub fn read_blob(path: impl AsRef<Path>) -> Result<Blob, FormatError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let file_len = file.metadata().map_err(|e| io_err(path, e))?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    let kind = BlobKind::from_magic(magic).ok_or_else(|| FormatError::BadMagic {
        path: show(path),
        expected: "one of DPEM, DPLT, DPAT, DPLG, DPRM".into(),
        found: String::from_utf8_lossy(&magic).into_owned(),
    })?;
    let version = read_u32(&mut r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            path: show(path),
            found: version,
        });
    }
    let ndims = read_u32(&mut r, path, "ndims")?;
    if ndims == 0 || ndims > MAX_DIMS {
        return Err(FormatError::Header {
            path: show(path),
            reason: format!("{ndims} dims (expected 1..={MAX_DIMS})"),
        });
    }
    let dims = (0..ndims)
        .map(|_| read_u32(&mut r, path, "dims"))
        .collect::<Result<Vec<_>, _>>()?;
    let mut len_buf = [0u8; 8];
    read_exact(&mut r, &mut len_buf, path, "payload length")?;
    let payload_len = u64::from_le_bytes(len_buf);

    let header_len = 20 + 4 * ndims as u64;
    let expected = Blob::element_count(&dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Header {
            path: show(path),
            reason: format!("dims {dims:?} overflow"),
        })?;
    if payload_len != expected {
        return Err(FormatError::Header {
            path: show(path),
            reason: format!("dims {dims:?} need {expected} payload bytes, header declares {payload_len}"),
        });
    }
    let available = file_len.saturating_sub(header_len);
    if available < payload_len {
        return Err(FormatError::ShortRead {
            path: show(path),
            reason: format!("payload has {available} of {payload_len} bytes"),
        });
    }
    if available > payload_len {
        return Err(FormatError::Header {
            path: show(path),
            reason: format!("{} trailing bytes after payload", available - payload_len),
        });
    }

    let mut payload = vec![0u8; payload_len as usize];
    read_exact(&mut r, &mut payload, path, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            path: show(path),
            index,
        });
    }
    Ok(Blob { kind, dims, data })
}

/// Read a blob and require a given kind and rank.
pub fn read_blob_as(path: impl AsRef<Path>, kind: BlobKind, rank: usize) -> Result<Blob, FormatError> {
    let path = path.as_ref();
    let blob = read_blob(path)?;
    if blob.kind != kind {
        return Err(FormatError::BadMagic {
            path: show(path),
            expected: String::from_utf8_lossy(&kind.magic()).into_owned(),
            found: String::from_utf8_lossy(&blob.kind.magic()).into_owned(),
        });
    }
    if blob.dims.len() != rank {
        return Err(FormatError::Header {
            path: show(path),
            reason: format!("expected {rank} dims, found {:?}", blob.dims),
        });
    }
    Ok(blob)
}

fn dim_u32(path: &Path, what: &str, v: usize) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Header {
        path: show(path),
        reason: format!("{what} {v} does not fit in u32"),
    })
}

pub fn write_embeddings(path: impl AsRef<Path>, emb: &EmbeddingMatrix) -> Result<(), FormatError> {
    let path = path.as_ref();
    let dims = vec![dim_u32(path, "count", emb.count())?, dim_u32(path, "dim", emb.dim())?];
    write_blob(path, &Blob::new(BlobKind::Embeddings, dims, emb.values().to_vec()))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, FormatError> {
    let path = path.as_ref();
    let blob = read_blob_as(path, BlobKind::Embeddings, 2)?;
    EmbeddingMatrix::new(blob.dims[0] as usize, blob.dims[1] as usize, blob.data).map_err(|source| {
        FormatError::Invalid {
            path: show(path),
            source,
        }
    })
}

pub fn write_relevance_map(path: impl AsRef<Path>, map: &RelevanceMap) -> Result<(), FormatError> {
    let path = path.as_ref();
    let dims = vec![dim_u32(path, "rows", map.rows())?, dim_u32(path, "cols", map.cols())?];
    write_blob(path, &Blob::new(BlobKind::RelevanceMap, dims, map.scores().to_vec()))
}

pub fn read_relevance_map(path: impl AsRef<Path>) -> Result<RelevanceMap, FormatError> {
    let path = path.as_ref();
    let blob = read_blob_as(path, BlobKind::RelevanceMap, 2)?;
    RelevanceMap::new(blob.dims[0] as usize, blob.dims[1] as usize, blob.data).map_err(|source| {
        FormatError::Invalid {
            path: show(path),
            source,
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| FormatError::Json {
        path: show(path),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| FormatError::Json {
        path: show(path),
        source,
    })
}

/// JSON form of a [`TokenMask`]; `kept` lists kept cell indices ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub schema_version: u32,
    pub stage: Stage,
    pub rows: usize,
    pub cols: usize,
    pub patch_size: Option<usize>,
    pub kept: Vec<usize>,
}

impl MaskFile {
    pub fn from_mask(mask: &TokenMask, patch_size: Option<usize>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stage: mask.stage(),
            rows: mask.rows(),
            cols: mask.cols(),
            patch_size,
            kept: mask.kept_indices(),
        }
    }

    pub fn to_mask(&self) -> crate::Result<TokenMask> {
        TokenMask::from_kept(self.rows, self.cols, &self.kept, self.stage)
    }
}

pub fn write_mask(path: impl AsRef<Path>, mask: &TokenMask, patch_size: Option<usize>) -> Result<(), FormatError> {
    write_json(path.as_ref(), &MaskFile::from_mask(mask, patch_size))
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<MaskFile, FormatError> {
    let path = path.as_ref();
    let file: MaskFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(FormatError::Version {
            path: show(path),
            found: file.schema_version,
        });
    }
    file.to_mask().map_err(|source| FormatError::Invalid {
        path: show(path),
        source,
    })?;
    Ok(file)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<TokenMask, FormatError> {
    let path = path.as_ref();
    read_mask_file(path)?.to_mask().map_err(|source| FormatError::Invalid {
        path: show(path),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFiles {
    pub hidden: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
}

/// Where the producer measured the last-token hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPoint {
    PreNorm,
    PostNorm,
}

/// How per-head attention was reduced before export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    Mean,
}

/// Describes one exported decoder run.
///
/// `hidden` is a DPLT blob `[num_layers, hidden_dim]`. `attention` is a DPAT
/// blob `[num_layers, seq_len]` holding the head-averaged attention of the
/// last token over the whole sequence; `visual_range` selects the visual
/// span and `grid` gives its spatial layout. `logits` is a DPLG blob
/// `[num_layers, vocab]`. `score` is an optional per-sample quality score
/// (e.g. F1) used only by corpus analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub schema_version: u32,
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub visual_range: [usize; 2],
    pub grid: GridSize,
    pub files: TraceFiles,
    pub norm_point: NormPoint,
    pub head_aggregation: HeadAggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn geometry(path: &Path, reason: impl Into<String>) -> FormatError {
    FormatError::Geometry {
        path: show(path),
        reason: reason.into(),
    }
}

/// Load a manifest and assemble its [`DecoderTrace`], checking every
/// declared extent against the referenced blobs.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(TraceManifest, DecoderTrace), FormatError> {
    let path = path.as_ref();
    let manifest: TraceManifest = read_json(path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(FormatError::Version {
            path: show(path),
            found: manifest.schema_version,
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |name: &str| -> PathBuf { base.join(name) };
    let (layers, dim) = (manifest.num_layers, manifest.hidden_dim);
    let [start, end] = manifest.visual_range;
    if start > end {
        return Err(geometry(path, format!("visual_range [{start}, {end}) is reversed")));
    }
    if manifest.grid.rows * manifest.grid.cols != end - start {
        return Err(geometry(
            path,
            format!(
                "grid {}x{} does not cover visual_range [{start}, {end})",
                manifest.grid.rows, manifest.grid.cols
            ),
        ));
    }

    let hidden = read_blob_as(resolve(&manifest.files.hidden), BlobKind::LayerHidden, 2)?;
    if hidden.dims != [layers as u32, dim as u32] {
        return Err(geometry(
            path,
            format!("hidden blob is {:?}, manifest declares [{layers}, {dim}]", hidden.dims),
        ));
    }

    let attention = match &manifest.files.attention {
        None => None,
        Some(name) => {
            let blob = read_blob_as(resolve(name), BlobKind::Attention, 2)?;
            let seq = blob.dims[1] as usize;
            if blob.dims[0] as usize != layers {
                return Err(geometry(path, format!("attention blob has {} layers, expected {layers}", blob.dims[0])));
            }
            if end > seq {
                return Err(geometry(
                    path,
                    format!("visual_range end {end} exceeds attention sequence length {seq}"),
                ));
            }
            Some(
                blob.data
                    .chunks_exact(seq.max(1))
                    .flat_map(|row| row[start..end].iter().copied())
                    .collect::<Vec<f32>>(),
            )
        }
    };

    let invalid = |source| FormatError::Invalid {
        path: show(path),
        source,
    };
    let mut trace = DecoderTrace::new(layers, dim, hidden.data, (start, end), attention).map_err(invalid)?;

    if let Some(name) = &manifest.files.logits {
        let blob = read_blob_as(resolve(name), BlobKind::Logits, 2)?;
        if blob.dims[0] as usize != layers {
            return Err(geometry(path, format!("logits blob has {} layers, expected {layers}", blob.dims[0])));
        }
        trace = trace.with_logits(blob.dims[1] as usize, blob.data).map_err(invalid)?;
    }
    Ok((manifest, trace))
}

/// Everything [`write_trace`] needs besides the trace itself.
#[derive(Debug, Clone)]
pub struct TraceMeta {
    pub model_name: String,
    pub grid: GridSize,
    pub norm_point: NormPoint,
    pub score: Option<f64>,
}

/// Write `<stem>.hidden.bin`, optional `<stem>.attention.bin` and
/// `<stem>.logits.bin`, and `<stem>.manifest.json` into `dir`. Attention is
/// stored over `[0, visual_end)` with zeros before the visual span.
pub fn write_trace(dir: impl AsRef<Path>, stem: &str, trace: &DecoderTrace, meta: &TraceMeta) -> Result<PathBuf, FormatError> {
    let dir = dir.as_ref();
    let layers = trace.num_layers();
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    let (start, end) = trace.visual_range();
    if meta.grid.rows * meta.grid.cols != end - start {
        return Err(geometry(&manifest_path, "grid does not cover the visual range"));
    }
    let l32 = dim_u32(&manifest_path, "num_layers", layers)?;

    let hidden_name = format!("{stem}.hidden.bin");
    write_blob(
        dir.join(&hidden_name),
        &Blob::new(
            BlobKind::LayerHidden,
            vec![l32, dim_u32(&manifest_path, "hidden_dim", trace.hidden_dim())?],
            trace.hidden_flat().to_vec(),
        ),
    )?;

    let attention = match trace.attention_flat() {
        None => None,
        Some(_) => {
            let name = format!("{stem}.attention.bin");
            let mut data = Vec::with_capacity(layers * end);
            for l in 0..layers {
                data.extend(std::iter::repeat_n(0.0f32, start));
                data.extend_from_slice(trace.attention(l).expect("present"));
            }
            write_blob(
                dir.join(&name),
                &Blob::new(BlobKind::Attention, vec![l32, dim_u32(&manifest_path, "seq_len", end)?], data),
            )?;
            Some(name)
        }
    };

    let logits = match trace.logits_flat() {
        None => None,
        Some(values) => {
            let name = format!("{stem}.logits.bin");
            write_blob(
                dir.join(&name),
                &Blob::new(
                    BlobKind::Logits,
                    vec![l32, dim_u32(&manifest_path, "vocab", trace.vocab())?],
                    values.to_vec(),
                ),
            )?;
            Some(name)
        }
    };

    let manifest = TraceManifest {
        schema_version: SCHEMA_VERSION,
        model_name: meta.model_name.clone(),
        num_layers: layers,
        hidden_dim: trace.hidden_dim(),
        visual_range: [start, end],
        grid: meta.grid,
        files: TraceFiles {
            hidden: hidden_name,
            attention,
            logits,
        },
        norm_point: meta.norm_point,
        head_aggregation: HeadAggregation::Mean,
        score: meta.score,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &TraceManifest) -> Result<(), FormatError> {
    write_json(path.as_ref(), manifest)
}
