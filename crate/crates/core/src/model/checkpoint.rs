//! Binary checkpoints.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic        8 bytes  "CYRGCKPT"
//! version      u32      (currently 1)
//! descriptor   u32 length + UTF-8 JSON of the model `Descriptor`
//! meta         u32 length + UTF-8 JSON (free-form run state)
//! count        u32      number of blobs
//! blob*        u32 name length, name, u32 rank, rank x u32 dims,
//!              float32 payload (product of dims values)
//! ```
//!
//! Blobs named `state/...` carry optimizer state; everything else is a model
//! parameter. The descriptor is compared before any payload is read.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Descriptor, Model};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CYRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_PREFIX: &str = "state/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
    /// Optimizer and other run state, keyed without the `state/` prefix.
    pub state: BTreeMap<String, Tensor>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_blob(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    put_str(w, name)?;
    put_u32(w, 4)?;
    for d in t.shape {
        put_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(4 * t.data.len());
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let descriptor = serde_json::to_string(&ckpt.model.descriptor)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let meta =
        serde_json::to_string(&ckpt.meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    put_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
    put_str(&mut w, &descriptor).map_err(io)?;
    put_str(&mut w, &meta).map_err(io)?;
    put_u32(&mut w, (ckpt.model.params.len() + ckpt.state.len()) as u32).map_err(io)?;
    for (name, t) in &ckpt.model.params {
        put_blob(&mut w, name, t).map_err(io)?;
    }
    for (name, t) in &ckpt.state {
        put_blob(&mut w, &format!("{STATE_PREFIX}{name}"), t).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| self.truncated(e))?;
        Ok(buf)
    }

    fn truncated(&self, e: std::io::Error) -> Error {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            self.format("file is truncated")
        } else {
            Error::io(self.path, e)
        }
    }

    fn format(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, limit: usize) -> Result<String> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(self.format(format!("string length {n} exceeds {limit}")));
        }
        String::from_utf8(self.bytes(n)?).map_err(|_| self.format("string is not UTF-8"))
    }

    fn header(&mut self) -> Result<(Descriptor, serde_json::Value)> {
        let magic = self.bytes(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(self.format("not a checkpoint (bad magic)"));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(self.format(format!("unsupported checkpoint version {version}")));
        }
        let d = self.string(1 << 20)?;
        let descriptor: Descriptor = serde_json::from_str(&d)
            .map_err(|e| self.format(format!("bad descriptor: {e}")))?;
        let m = self.string(1 << 24)?;
        let meta = serde_json::from_str(&m).map_err(|e| self.format(format!("bad meta: {e}")))?;
        Ok((descriptor, meta))
    }
}

fn open(path: &Path) -> Result<Reader<'_, BufReader<fs::File>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Reader {
        inner: BufReader::new(file),
        path,
    })
}

/// Reads only the descriptor.
pub fn read_descriptor(path: impl AsRef<Path>) -> Result<Descriptor> {
    Ok(open(path.as_ref())?.header()?.0)
}

/// Loads a checkpoint. When `expected` is given, a differing descriptor is
/// rejected before any parameter payload is read.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&Descriptor>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let (descriptor, meta) = r.header()?;
    if let Some(exp) = expected {
        if *exp != descriptor {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "architecture mismatch: checkpoint has {}, expected {}",
                    serde_json::to_string(&descriptor).unwrap_or_default(),
                    serde_json::to_string(exp).unwrap_or_default()
                ),
            });
        }
    }
    descriptor.validate()?;
    let count = r.u32()?;
    let mut params = BTreeMap::new();
    let mut state = BTreeMap::new();
    for _ in 0..count {
        let name = r.string(4096)?;
        let rank = r.u32()? as usize;
        if rank != 4 {
            return Err(r.format(format!("blob `{name}` has rank {rank}, expected 4")));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data);
        match name.strip_prefix(STATE_PREFIX) {
            Some(s) => state.insert(s.to_string(), t),
            None => params.insert(name, t),
        };
    }
    if let Descriptor::Amortized(arch) = &descriptor {
        for (name, shape) in arch.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape == shape => {}
                Some(t) => {
                    return Err(r.format(format!(
                        "parameter `{name}` has shape {:?}, architecture needs {shape:?}",
                        t.shape
                    )))
                }
                None => return Err(r.format(format!("parameter `{name}` is missing"))),
            }
        }
    }
    Ok(Checkpoint {
        model: Model { descriptor, params },
        meta,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Volume;
    use crate::model::ArchSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::init(Descriptor::Amortized(ArchSpec::default()), 5).unwrap();
        // Give the head non-zero weights so predictions are non-trivial.
        for v in &mut model.params.get_mut("head.weight").unwrap().data {
            *v = crate::model::to_f32(0.01);
        }
        let mut state = BTreeMap::new();
        state.insert("m/head.bias".to_string(), Tensor::new([3, 1, 1, 1], vec![0.5, -0.25, 1.0]));
        let ckpt = Checkpoint {
            model: model.clone(),
            meta: serde_json::json!({"step": 12}),
            state,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path, Some(&model.descriptor)).unwrap();
        assert_eq!(back, ckpt);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Volume::from_fn([16, 16, 16], |_, _, _| rng.random());
        let b = Volume::from_fn([16, 16, 16], |_, _, _| rng.random());
        let u1 = model.predict_field(&a, &b).unwrap();
        let u2 = back.model.predict_field(&a, &b).unwrap();
        assert!(!u1.is_zero());
        assert_eq!(u1, u2);
    }

    #[test]
    fn descriptor_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::init(Descriptor::Amortized(ArchSpec::default()), 5).unwrap();
        let ckpt = Checkpoint {
            model,
            meta: serde_json::Value::Null,
            state: BTreeMap::new(),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let other = Descriptor::FieldBank { shape: [8, 8, 8] };
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
        assert_eq!(read_descriptor(&path).unwrap(), ckpt.model.descriptor);
    }

    #[test]
    fn garbage_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPT\x01\x00\x00\x00").unwrap();
        assert!(load_checkpoint(&path, None).is_err());

        let model = Model::init(Descriptor::Amortized(ArchSpec::default()), 5).unwrap();
        let ckpt = Checkpoint {
            model,
            meta: serde_json::Value::Null,
            state: BTreeMap::new(),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
