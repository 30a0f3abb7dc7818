//! PHGM: the on-disk model checkpoint.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "PHGM" (4 bytes) | version u32 = 1 |
//! input_dim u32 | hidden_dim u32 | num_layers u32 | num_parts u32 | num_classes u32 |
//! then each tensor as f32 row-major in canonical order:
//!   theta[0] .. theta[T-1], proj, then per part: weight, bias
//! ```
//!
//! A JSON sidecar at `<stem>.meta.json` carries the hyperparameters needed
//! to rebuild the evaluation pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{Classifier, DeltaPolicy, ModelParams};

pub const PHGM_MAGIC: [u8; 4] = *b"PHGM";
pub const PHGM_VERSION: u32 = 1;

/// Hyperparameters stored next to the tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub eps: f64,
    pub beta: f64,
    pub delta: DeltaPolicy,
    pub levels: Vec<u32>,
    pub num_classes: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Path of the hyperparameter sidecar for a checkpoint path.
pub fn checkpoint_meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&PHGM_MAGIC);
    buf.extend_from_slice(&PHGM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.hidden_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.num_layers() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.num_parts() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.num_classes() as u32).to_le_bytes());
    for k in 0..params.num_tensors() {
        for v in params.tensor(k) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let meta_file = checkpoint_meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_file, json).map_err(|e| Error::io(&meta_file, e))?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], FormatError> {
    if *pos + n > buf.len() {
        return Err(FormatError::Truncated {
            offset: *pos as u64,
            needed: (*pos + n - buf.len()) as u64,
            available: (buf.len() - *pos) as u64,
        });
    }
    let out = &buf[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> std::result::Result<u32, FormatError> {
    let b = take(buf, pos, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_matrix(buf: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let start = *pos;
    let bytes = take(buf, pos, rows * cols * 4)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (elem, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                offset: (start + elem * 4) as u64,
                image: 0,
                element: elem,
            }
            .into());
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches"))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let meta_file = checkpoint_meta_path(path);
    let meta_text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Invalid(format!("checkpoint meta {}: {e}", meta_file.display())))?;

    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let magic = take(&buf, &mut pos, 4)?;
    if magic != PHGM_MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            expected: PHGM_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version_offset = pos as u64;
    let version = read_u32(&buf, &mut pos)?;
    if version != PHGM_VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: version_offset,
            version,
        }
        .into());
    }
    let input_dim = read_u32(&buf, &mut pos)? as usize;
    let hidden_dim = read_u32(&buf, &mut pos)? as usize;
    let num_layers = read_u32(&buf, &mut pos)? as usize;
    let num_parts = read_u32(&buf, &mut pos)? as usize;
    let num_classes = read_u32(&buf, &mut pos)? as usize;
    if input_dim == 0 || hidden_dim == 0 || num_layers == 0 || num_parts == 0 || num_classes == 0 {
        return Err(FormatError::BadHeader {
            offset: 8,
            field: "dims",
            message: format!(
                "all dimensions must be positive, got \
                 {input_dim}/{hidden_dim}/{num_layers}/{num_parts}/{num_classes}"
            ),
        }
        .into());
    }

    let mut theta = Vec::with_capacity(num_layers);
    let mut d_in = input_dim;
    for _ in 0..num_layers {
        theta.push(read_matrix(&buf, &mut pos, d_in, hidden_dim)?);
        d_in = hidden_dim;
    }
    let proj = read_matrix(&buf, &mut pos, input_dim, hidden_dim)?;
    let mut classifiers = Vec::with_capacity(num_parts);
    for _ in 0..num_parts {
        let weight = read_matrix(&buf, &mut pos, hidden_dim, num_classes)?;
        let bias_mat = read_matrix(&buf, &mut pos, 1, num_classes)?;
        let bias = Array1::from_vec(bias_mat.into_raw_vec_and_offset().0);
        classifiers.push(Classifier { weight, bias });
    }
    if pos != buf.len() {
        return Err(FormatError::TrailingBytes {
            offset: pos as u64,
            extra: (buf.len() - pos) as u64,
        }
        .into());
    }

    if meta.num_classes != num_classes {
        return Err(Error::Invalid(format!(
            "sidecar lists {} classes, checkpoint holds {num_classes}",
            meta.num_classes
        )));
    }
    let params = ModelParams {
        theta,
        proj,
        classifiers,
        eps: meta.eps as f32,
        beta: meta.beta as f32,
    };
    Ok((params, meta))
}
