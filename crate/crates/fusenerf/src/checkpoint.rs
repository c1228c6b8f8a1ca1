//! Versioned binary checkpoints: named parameter arrays with shapes, Adam
//! moments, step counter and the generating [`TrainConfig`]. Values are
//! stored as little-endian f64 bits, so a save/load round trip is exact.

use std::io::Write;
use std::path::Path;

use crate::diffmath::{AdamState, ParameterStore};
use crate::error::{Error, Result};
use crate::train::{SceneModel, TrainConfig};

const MAGIC: &[u8; 4] = b"FNC1";
const VERSION: u32 = 1;

/// A deserialized checkpoint, not yet bound to model structures.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub manifest_hash: String,
    pub store: ParameterStore,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Re-bind the stored parameters to field/head structures.
    pub fn into_model(self) -> Result<(SceneModel, AdamState, TrainConfig, String)> {
        let model = SceneModel::attach(&self.config, self.store)?;
        Ok((model, self.adam, self.config, self.manifest_hash))
    }
}

pub fn save(
    path: &Path,
    config: &TrainConfig,
    manifest_hash: &str,
    store: &ParameterStore,
    adam: &AdamState,
) -> Result<()> {
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::format(path, e.to_string()))?;
    let (m, v) = adam.moments();

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_bytes(&mut out, &config_json);
    write_bytes(&mut out, manifest_hash.as_bytes());
    out.extend_from_slice(&adam.step_count().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (i, id) in store.ids().enumerate() {
        write_bytes(&mut out, store.name(id).as_bytes());
        let shape = store.shape(id);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        write_f64s(&mut out, store.value(id));
        write_f64s(&mut out, &m[i]);
        write_f64s(&mut out, &v[i]);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config: TrainConfig = serde_json::from_slice(r.bytes_block()?)
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let manifest_hash = String::from_utf8(r.bytes_block()?.to_vec())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let step = r.u64()?;
    let count = r.u32()? as usize;

    let mut store = ParameterStore::new();
    let mut moments_m = Vec::with_capacity(count);
    let mut moments_v = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.bytes_block()?.to_vec())
            .map_err(|e| Error::format(path, e.to_string()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let values = r.f64s(n)?;
        moments_m.push(r.f64s(n)?);
        moments_v.push(r.f64s(n)?);
        store.register(&name, &shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    let adam = AdamState::from_parts(&store, config.adam, moments_m, moments_v, step)?;
    Ok(Checkpoint { config, manifest_hash, store, adam })
}

fn write_bytes(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_block(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
