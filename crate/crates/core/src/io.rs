//! Binary feature store and checkpoint formats, vocabulary files.
//!
//! Feature file (`IKRLFEAT`, all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "IKRLFEAT"
//! version   u32      1
//! d_i       u32
//! entities  u64
//! per entity, ascending index:
//!   index   u64
//!   count   u32
//!   count * d_i f32
//! ```
//!
//! Checkpoint file (`IKRLMODL`):
//!
//! ```text
//! magic     8 bytes  "IKRLMODL"
//! version   u32      1
//! d_s       u32
//! d_i       u32
//! |E|       u64
//! |R|       u64
//! E rows, R rows, M rows as f32, row-major
//! ```
//!
//! Every writer goes through a temporary file in the target directory followed
//! by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::Vocabulary;
use crate::matrix::Matrix;
use crate::model::{FeatureStore, ModelParams};

pub const FEATURE_MAGIC: &[u8; 8] = b"IKRLFEAT";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IKRLMODL";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 24;
pub const CHECKPOINT_HEADER_LEN: usize = 36;

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: need {n} bytes for {what} at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes_len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
        let bytes = self.take(bytes_len, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_features(store: &FeatureStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(store.entity_count() as u64).to_le_bytes());
    for (entity, images) in store.iter() {
        out.extend_from_slice(&(entity as u64).to_le_bytes());
        out.extend_from_slice(&(images.len() as u32).to_le_bytes());
        for img in images {
            put_f32s(&mut out, img);
        }
    }
    out
}

/// Parses a feature file. With `expected_dim`, a different `d_i` is an error.
pub fn decode_features(bytes: &[u8], expected_dim: Option<usize>) -> Result<FeatureStore> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != FEATURE_MAGIC {
        return Err(Error::Format("bad magic, not an IKRLFEAT file".to_owned()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature file version {version}"
        )));
    }
    let dim = r.u32("d_i")? as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(Error::Dimension(format!(
                "feature file has d_i = {dim}, configuration expects {expected}"
            )));
        }
    }
    let count = r.u64("entity count")?;
    let mut store = FeatureStore::new(dim);
    for _ in 0..count {
        let entity = r.u64("entity index")? as usize;
        if store.get(entity).is_some() {
            return Err(Error::Format(format!("duplicate record for entity {entity}")));
        }
        let n = r.u32("image count")? as usize;
        if n == 0 {
            return Err(Error::Format(format!("entity {entity} has an empty image list")));
        }
        let images = (0..n)
            .map(|_| r.f32s(dim, "feature vector"))
            .collect::<Result<Vec<_>>>()?;
        store.insert(entity, images)?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write_features(path: impl AsRef<Path>, store: &FeatureStore) -> Result<()> {
    write_atomic(path, &encode_features(store))
}

pub fn read_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<FeatureStore> {
    decode_features(&read_file(path.as_ref())?, expected_dim)
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let payload = params.entities.as_slice().len()
        + params.relations.as_slice().len()
        + params.projection.as_slice().len();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.entity_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.image_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.num_entities() as u64).to_le_bytes());
    out.extend_from_slice(&(params.num_relations() as u64).to_le_bytes());
    put_f32s(&mut out, params.entities.as_slice());
    put_f32s(&mut out, params.relations.as_slice());
    put_f32s(&mut out, params.projection.as_slice());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, not an IKRLMODL file".to_owned()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let ds = r.u32("d_s")? as usize;
    let di = r.u32("d_i")? as usize;
    let ne = r.u64("|E|")? as usize;
    let nr = r.u64("|R|")? as usize;
    let expected = ne
        .checked_add(nr)
        .and_then(|rows| rows.checked_mul(ds))
        .and_then(|n| n.checked_add(ds.checked_mul(di)?))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("checkpoint header overflows".to_owned()))?;
    let available = bytes.len() - CHECKPOINT_HEADER_LEN;
    if available != expected {
        return Err(Error::Format(format!(
            "checkpoint payload is {available} bytes, header implies {expected}"
        )));
    }
    let entities = Matrix::from_vec(ne, ds, r.f32s(ne * ds, "entity rows")?);
    let relations = Matrix::from_vec(nr, ds, r.f32s(nr * ds, "relation rows")?);
    let projection = Matrix::from_vec(ds, di, r.f32s(ds * di, "projection rows")?);
    r.finish()?;
    Ok(ModelParams {
        entities,
        relations,
        projection,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Reads a name list, one per line; line number is the index.
pub fn read_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_names(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_vocabulary(entities: impl AsRef<Path>, relations: impl AsRef<Path>) -> Result<Vocabulary> {
    Vocabulary::from_names(&read_names(entities)?, &read_names(relations)?)
}
