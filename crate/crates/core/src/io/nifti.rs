//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only the fields the engine needs are interpreted: `dim`, `datatype`,
//! `pixdim[1..4]`, `vox_offset`, `scl_slope`/`scl_inter`, `intent_code` and
//! `descrip`. Orientation (qform/sform) is written as a diagonal sform on
//! output and ignored on input. Both byte orders are accepted when reading;
//! output is always little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte (empty) extension flag.
pub const DATA_OFFSET: usize = 352;

pub const INTENT_NONE: i16 = 0;
pub const INTENT_VECTOR: i16 = 1007;

/// Scalar storage types this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::Uint8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            64 => Some(Datatype::Float64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// Decoded image: dimensions, spacing and scaled real-valued payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    /// `dim[1..=dim[0]]`.
    pub dims: Vec<usize>,
    /// `pixdim[1..4]`.
    pub spacing: [f64; 3],
    pub datatype: Datatype,
    pub intent_code: i16,
    pub descrip: String,
    /// Values after applying `scl_slope`/`scl_inter`.
    pub data: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn f64(&self, off: usize) -> f64 {
        let b: [u8; 8] = self.bytes[off..off + 8].try_into().unwrap();
        if self.big_endian {
            f64::from_be_bytes(b)
        } else {
            f64::from_le_bytes(b)
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read(path: &Path) -> Result<NiftiImage> {
    let bytes = read_file(path)?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NiftiImage> {
    let header_err = |field: &'static str, reason: String| Error::Header {
        path: path.to_path_buf(),
        field,
        reason,
    };
    if bytes.len() < HEADER_SIZE {
        return Err(header_err(
            "sizeof_hdr",
            format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(header_err("sizeof_hdr", format!("expected 348, got {size_le}"))),
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(header_err(
            "magic",
            format!(
                "expected single-file NIfTI-1 `n+1`, got {:?}",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let r = Reader { bytes, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(header_err("dim[0]", format!("must be in 1..=7, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(header_err("dim", format!("dim[{i}] = {d} is not positive")));
        }
        dims.push(d as usize);
    }

    let code = r.i16(70);
    let datatype = Datatype::from_code(code).ok_or_else(|| {
        header_err(
            "datatype",
            format!("unsupported code {code} (supported: uint8=2, int16=4, float32=16, float64=64)"),
        )
    })?;
    let spacing = [r.f32(80) as f64, r.f32(84) as f64, r.f32(88) as f64];
    let vox_offset = r.f32(108);
    if vox_offset < HEADER_SIZE as f32 {
        return Err(header_err("vox_offset", format!("{vox_offset} lies inside the header")));
    }
    let vox_offset = vox_offset as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    let intent_code = r.i16(68);
    let descrip = String::from_utf8_lossy(&bytes[148..228])
        .trim_end_matches('\0')
        .to_string();

    let n: usize = dims.iter().product();
    let width = datatype.bytes();
    let end = vox_offset + n * width;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("payload truncated: need {end} bytes, file has {}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = vox_offset + i * width;
        let raw = match datatype {
            Datatype::Uint8 => bytes[off] as f64,
            Datatype::Int16 => r.i16(off) as f64,
            Datatype::Float32 => r.f32(off) as f64,
            Datatype::Float64 => r.f64(off),
        };
        data.push(if slope == 1.0 && inter == 0.0 {
            raw
        } else {
            slope * raw + inter
        });
    }

    Ok(NiftiImage {
        dims,
        spacing,
        datatype,
        intent_code,
        descrip,
        data,
    })
}

/// Serializes `image` as a little-endian single-file NIfTI-1 byte stream.
pub fn encode(image: &NiftiImage) -> Result<Vec<u8>> {
    let n: usize = image.dims.iter().product();
    if n != image.data.len() {
        return Err(Error::InvalidArgument(format!(
            "NIfTI payload has {} values, dims {:?} need {n}",
            image.data.len(),
            image.dims
        )));
    }
    if image.dims.is_empty() || image.dims.len() > 7 {
        return Err(Error::InvalidArgument(format!(
            "NIfTI supports 1..=7 dimensions, got {}",
            image.dims.len()
        )));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, image.dims.len() as i16);
    for (i, &d) in image.dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| {
            Error::InvalidArgument(format!("dimension {d} exceeds the NIfTI-1 limit"))
        })?;
        put_i16(&mut h, 42 + 2 * i, d);
    }
    for i in image.dims.len()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 68, image.intent_code);
    put_i16(&mut h, 70, image.datatype.code());
    put_i16(&mut h, 72, (image.datatype.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, image.spacing[a] as f32);
    }
    for a in 3..7 {
        put_f32(&mut h, 80 + 4 * a, 1.0);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // millimetres
    let desc = image.descrip.as_bytes();
    let take = desc.len().min(79);
    h[148..148 + take].copy_from_slice(&desc[..take]);
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 2);
    for a in 0..3 {
        put_f32(&mut h, 280 + 16 * a + 4 * a, image.spacing[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(n * image.datatype.bytes());
    for &v in &image.data {
        match image.datatype {
            Datatype::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Datatype::Int16 => out.extend_from_slice(
                &(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes(),
            ),
            Datatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Datatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

/// Writes `image`; a `.gz` suffix selects gzip compression.
pub fn write(image: &NiftiImage, path: &Path) -> Result<()> {
    let bytes = encode(image)?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&bytes)
    };
    result.map_err(|e| Error::io(path, e))
}
