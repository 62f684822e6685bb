//! Checkpoint container.
//!
//! ```text
//! "CKPT" | u32 version | u32 len | manifest JSON (sorted keys)
//!        | u32 count | count × (u32 len | utf-8 name)
//!        | count × NMAP tensor, in name-table order
//! ```
//! All integers little-endian. Parameters come first in layout order,
//! followed by `<bn>.running_mean` / `<bn>.running_var` pairs.

use std::path::Path;

use serde_json::{json, Value};

use super::{CiaNet, CiaNetConfig};
use crate::canonical::canonical_json;
use crate::error::{Error, Result};
use crate::tensor::{nmap, RunningStats, Scalar, Shape, Tensor};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

fn named_tensors<T: Scalar>(model: &CiaNet<T>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> =
        model.params.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect();
    for s in &model.bn_stats {
        let c = s.stats.mean.len();
        let to = |v: &[T]| {
            Tensor::from_vec(Shape::new(1, c, 1, 1), v.iter().map(|x| x.as_f64() as f32).collect())
                .expect("stats shape")
        };
        out.push((format!("{}.running_mean", s.name), to(&s.stats.mean)));
        out.push((format!("{}.running_var", s.name), to(&s.stats.var)));
    }
    out
}

pub fn encode<T: Scalar>(model: &CiaNet<T>, meta: &Value) -> Vec<u8> {
    let manifest = canonical_json(&json!({
        "format": "cianet-checkpoint",
        "config": model.config,
        "meta": meta,
    }));
    let tensors = named_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, _) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for (_, t) in &tensors {
        out.extend_from_slice(&nmap::encode(t));
    }
    out
}

pub fn save<T: Scalar>(model: &CiaNet<T>, meta: &Value, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, meta)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.file, self.bytes.len() as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decoded checkpoint: the network plus free-form metadata.
pub struct Loaded<T> {
    pub model: CiaNet<T>,
    pub meta: Value,
}

pub fn decode<T: Scalar>(bytes: &[u8], file: &Path) -> Result<Loaded<T>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(file, 0, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(file, 4, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("manifest length")? as usize;
    let manifest_at = r.pos;
    let manifest: Value = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::parse(file, manifest_at as u64 + e.column() as u64, e.to_string()))?;
    let config: CiaNetConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| Error::parse(file, manifest_at as u64, format!("manifest config: {e}")))?;
    let mut model = CiaNet::<T>::build(&config, 0)?;

    let count = r.u32("name table")? as usize;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::parse(file, at as u64, "name is not utf-8"))?;
        names.push(name.to_string());
    }
    let expected = named_tensors(&model);
    if names.len() != expected.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} tensors but the configured network needs {}",
            names.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, (want, want_t)) in names.iter().zip(&expected) {
        if name != want {
            return Err(Error::Contract(format!("checkpoint tensor {name} where {want} was expected")));
        }
        let at = r.pos;
        let (t, used) = nmap::decode_at::<T>(&bytes[at..], file, at as u64)?;
        r.pos += used;
        if t.shape() != want_t.shape() {
            return Err(Error::Contract(format!(
                "checkpoint tensor {name} has shape {} but the network expects {}",
                t.shape(),
                want_t.shape()
            )));
        }
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(file, r.pos as u64, "trailing bytes after checkpoint"));
    }
    let mut it = tensors.into_iter();
    for p in model.params.iter_mut() {
        p.tensor = it.next().expect("counted");
    }
    for s in model.bn_stats.iter_mut() {
        let mean = it.next().expect("counted").into_data();
        let var = it.next().expect("counted").into_data();
        s.stats = RunningStats { mean, var };
    }
    Ok(Loaded {
        model,
        meta: manifest["meta"].clone(),
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    decode(&bytes, path)
}
