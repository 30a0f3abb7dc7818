//! PHGF: the on-disk dataset format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "PHGF" (4 bytes) | version u32 = 1 | n_images u32 |
//! rows u32 | cols u32 | dim u32 |
//! then per image: label u32, rows*cols*dim f32 row-major (row, col, channel)
//! ```
//!
//! Two optional JSON companions sit next to the file, named by swapping the
//! extension: `<stem>.split.json` holds `{"train": [...], "query": [...],
//! "gallery": [...]}` of zero-based indices, and `<stem>.meta.json` holds
//! the generator configuration when the dataset is synthetic.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{Dataset, FeatureMap, SplitIndices, SynthConfig};
use crate::error::{Error, FormatError, Result};

pub const PHGF_MAGIC: [u8; 4] = *b"PHGF";
pub const PHGF_VERSION: u32 = 1;

/// Path of the split companion for a dataset path.
pub fn split_path(path: &Path) -> PathBuf {
    path.with_extension("split.json")
}

/// Path of the generator-metadata companion for a dataset path.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                needed: (self.pos + n - self.buf.len()) as u64,
                available: (self.buf.len() - self.pos) as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read a dataset; loads the split companion when present, otherwise the
/// whole set is gallery. The meta companion is loaded opportunistically.
pub fn read_phgf(path: &Path) -> Result<Dataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&buf);

    let magic = cur.take(4)?;
    if magic != PHGF_MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            expected: PHGF_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version_offset = cur.pos as u64;
    let version = cur.u32()?;
    if version != PHGF_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: version_offset,
            version,
        }
        .into());
    }
    let n_images = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    if n_images > 0 && (rows == 0 || cols == 0 || dim == 0) {
        return Err(FormatError::BadHeader {
            offset: 12,
            field: "rows/cols/dim",
            message: format!("grid shape {rows}x{cols}x{dim} must be positive"),
        }
        .into());
    }
    let per_image = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| FormatError::BadHeader {
            offset: 12,
            field: "rows/cols/dim",
            message: "grid shape overflows".into(),
        })?;

    let mut images = Vec::with_capacity(n_images);
    for image_idx in 0..n_images {
        let label = cur.u32()?;
        let data_offset = cur.pos;
        let bytes = cur.take(per_image * 4)?;
        let mut values = Vec::with_capacity(per_image);
        for (elem, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    offset: (data_offset + elem * 4) as u64,
                    image: image_idx,
                    element: elem,
                }
                .into());
            }
            values.push(v);
        }
        images.push(FeatureMap::new(rows, cols, dim, values, label)?);
    }
    if cur.pos != buf.len() {
        return Err(FormatError::TrailingBytes {
            offset: cur.pos as u64,
            extra: (buf.len() - cur.pos) as u64,
        }
        .into());
    }

    let split_file = split_path(path);
    let split = if split_file.exists() {
        let text = fs::read_to_string(&split_file).map_err(|e| Error::io(&split_file, e))?;
        serde_json::from_str::<SplitIndices>(&text)
            .map_err(|e| Error::Invalid(format!("split file {}: {e}", split_file.display())))?
    } else {
        SplitIndices {
            train: Vec::new(),
            query: Vec::new(),
            gallery: (0..images.len()).collect(),
        }
    };

    let meta_file = meta_path(path);
    let meta = if meta_file.exists() {
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        match serde_json::from_str::<DatasetMeta>(&text) {
            Ok(m) => m.synth,
            Err(_) => None,
        }
    } else {
        None
    };

    let dataset = Dataset { images, split, meta };
    dataset.validate_split()?;
    Ok(dataset)
}

/// Sidecar schema for `<stem>.meta.json`.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Write a dataset plus its split companion (and meta companion when the
/// dataset carries generator provenance).
pub fn write_phgf(dataset: &Dataset, path: &Path) -> Result<()> {
    write_phgf_with_digest(dataset, path, None)
}

/// As [`write_phgf`], recording a configuration digest in the meta sidecar.
pub fn write_phgf_with_digest(
    dataset: &Dataset,
    path: &Path,
    config_digest: Option<&str>,
) -> Result<()> {
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("cannot write an empty dataset".into()))?;
    let (rows, cols, dim) = (first.rows(), first.cols(), first.dim());
    for (i, img) in dataset.images.iter().enumerate() {
        if img.rows() != rows || img.cols() != cols || img.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "image {i} is {}x{}x{}, expected {rows}x{cols}x{dim}",
                img.rows(),
                img.cols(),
                img.dim()
            )));
        }
    }

    let per_image = rows * cols * dim;
    let mut buf = Vec::with_capacity(24 + dataset.images.len() * (4 + per_image * 4));
    buf.extend_from_slice(&PHGF_MAGIC);
    buf.extend_from_slice(&PHGF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.images.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for img in &dataset.images {
        buf.extend_from_slice(&img.label.to_le_bytes());
        for v in img.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let split_file = split_path(path);
    let split_json = serde_json::to_string_pretty(&dataset.split).expect("split serializes");
    fs::write(&split_file, split_json).map_err(|e| Error::io(&split_file, e))?;

    if dataset.meta.is_some() || config_digest.is_some() {
        let meta_file = meta_path(path);
        let meta = DatasetMeta {
            synth: dataset.meta.clone(),
            config_digest: config_digest.map(str::to_owned),
        };
        let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_file, meta_json).map_err(|e| Error::io(&meta_file, e))?;
    }
    Ok(())
}
