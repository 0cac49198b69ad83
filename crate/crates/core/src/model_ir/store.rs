use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"FRUSTBLB";

/// A dense float32 tensor with its declared shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::BlobLength {
                blob: "<new>".into(),
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("blob values must be finite".into()));
        }
        Ok(Self { shape, data })
    }
}

/// Blob id -> tensor. Ids double as file stems, so they are restricted to
/// `[A-Za-z0-9_.-]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    blobs: BTreeMap<String, Blob>,
}

impl WeightStore {
    pub fn insert(&mut self, id: String, blob: Blob) -> Result<()> {
        check_blob_id(&id)?;
        if blob.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "blob `{id}` has non-finite values"
            )));
        }
        self.blobs.insert(id, blob);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Blob> {
        self.blobs.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Blob> {
        self.blobs.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Blob)> {
        self.blobs.iter()
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

pub(crate) fn check_blob_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid blob id `{id}`")))
    }
}

/// Layout: magic, u32 rank, u32 dims, f32 payload; all little-endian.
pub fn write_blob(path: impl AsRef<Path>, blob: &Blob) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(BLOB_MAGIC)?;
    write(&(blob.shape.len() as u32).to_le_bytes())?;
    for &d in &blob.shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("blob dim {d} exceeds u32")))?;
        write(&d.to_le_bytes())?;
    }
    for &v in &blob.data {
        write(&v.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: impl AsRef<Path>) -> Result<Blob> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Format {
        what: "blob",
        message: format!("{}: {message}", path.display()),
    };
    if bytes.len() < 12 || &bytes[..8] != BLOB_MAGIC {
        return Err(bad("missing FRUSTBLB header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let rank = word(8) as usize;
    let header = 12 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(12 + 4 * i) as usize).collect();
    let payload = &bytes[header..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of float32 values".into()));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::BlobLength {
            blob: path.display().to_string(),
            expected,
            actual: data.len(),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value in payload".into()));
    }
    Ok(Blob { shape, data })
}
