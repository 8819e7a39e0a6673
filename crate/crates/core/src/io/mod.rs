//! Volume, label and field file I/O.
//!
//! Two formats are supported:
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`), see [`nifti`].
//! * `.rvol`, a headered raw format: 16-byte magic [`RVOL_MAGIC`], shape as
//!   3 × u32, spacing as 3 × f32, then the float32 payload (x fastest). All
//!   little-endian.

pub mod nifti;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{voxel_count, LabelVolume, Volume};
use nifti::{Datatype, NiftiImage};

pub const RVOL_MAGIC: &[u8; 16] = b"RVOL-VOLUME-F32\0";
const RVOL_HEADER: usize = 16 + 12 + 12;

fn is_rvol_path(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("rvol"))
        .unwrap_or(false)
}

fn modality_from_descrip(descrip: &str) -> String {
    descrip
        .strip_prefix("modality=")
        .map(str::to_string)
        .unwrap_or_default()
}

/// Reads a 3D scalar volume from NIfTI-1 or `.rvol`, detected by content.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let head = fs::read(path).map_err(|e| Error::io(path, e))?;
    if head.len() >= 16 && &head[..16] == RVOL_MAGIC {
        return decode_rvol(&head, path);
    }
    drop(head);
    let img = nifti::read(path)?;
    if img.dims.len() != 3 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            field: "dim[0]",
            reason: format!("expected a 3D volume, got {} dimensions", img.dims.len()),
        });
    }
    let shape = [img.dims[0], img.dims[1], img.dims[2]];
    let spacing = sanitize_spacing(img.spacing);
    Volume::new(shape, spacing, img.data, modality_from_descrip(&img.descrip))
}

fn sanitize_spacing(spacing: [f64; 3]) -> [f64; 3] {
    spacing.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

/// Writes NIfTI-1 float32, or `.rvol` when the extension says so.
pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_rvol_path(path) {
        let bytes = encode_rvol(vol)?;
        return fs::write(path, bytes).map_err(|e| Error::io(path, e));
    }
    let image = NiftiImage {
        dims: vol.shape.to_vec(),
        spacing: vol.spacing,
        datatype: Datatype::Float32,
        intent_code: nifti::INTENT_NONE,
        descrip: format!("modality={}", vol.modality),
        data: vol.data.clone(),
    };
    nifti::write(&image, path)
}

/// Writes labels as uint8 NIfTI (int16 when there are more than 256 classes).
pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let datatype = if labels.n_classes <= 256 {
        Datatype::Uint8
    } else {
        Datatype::Int16
    };
    let image = NiftiImage {
        dims: labels.shape.to_vec(),
        spacing: [1.0; 3],
        datatype,
        intent_code: nifti::INTENT_NONE,
        descrip: format!("labels n_classes={}", labels.n_classes),
        data: labels.data.iter().map(|&c| c as f64).collect(),
    };
    nifti::write(&image, path.as_ref())
}

/// Reads an integer label map. `n_classes` comes from the description written
/// by [`save_labels`], else from the largest id present.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let img = nifti::read(path)?;
    if img.dims.len() != 3 {
        return Err(Error::Header {
            path: path.to_path_buf(),
            field: "dim[0]",
            reason: format!("expected a 3D label map, got {} dimensions", img.dims.len()),
        });
    }
    let mut data = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("label value {v} is not a non-negative integer"),
            });
        }
        data.push(v as u16);
    }
    let max = data.iter().copied().max().unwrap_or(0);
    let n_classes = img
        .descrip
        .strip_prefix("labels n_classes=")
        .and_then(|s| s.parse::<u16>().ok())
        .filter(|&n| n > max)
        .unwrap_or(max + 1);
    LabelVolume::new([img.dims[0], img.dims[1], img.dims[2]], data, n_classes)
}

pub fn encode_rvol(vol: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(RVOL_HEADER + 4 * vol.len());
    out.extend_from_slice(RVOL_MAGIC);
    for &n in &vol.shape {
        let n = u32::try_from(n)
            .map_err(|_| Error::InvalidArgument(format!("axis length {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for &s in &vol.spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for &v in &vol.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_rvol(bytes: &[u8], path: &Path) -> Result<Volume> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < RVOL_HEADER || &bytes[..16] != RVOL_MAGIC {
        return Err(fmt("missing .rvol magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let shape = [u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize];
    let spacing = [f32_at(28) as f64, f32_at(32) as f64, f32_at(36) as f64];
    let n = voxel_count(shape);
    if bytes.len() != RVOL_HEADER + 4 * n {
        return Err(fmt(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len() - RVOL_HEADER,
            4 * n
        )));
    }
    let data = (0..n)
        .map(|i| f32_at(RVOL_HEADER + 4 * i) as f64)
        .collect();
    Volume::new(shape, spacing, data, "")
}
