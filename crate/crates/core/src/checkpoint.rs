//! Binary checkpoints: magic `SWCK`, format version `u32`, a
//! length-prefixed JSON metadata blob, a tensor manifest (name, dtype,
//! shape) and the little-endian tensor buffers in manifest order.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Run configuration as TOML.
    pub config: String,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn encode<T: Scalar>(meta: &CheckpointMeta, params: &ParamStore<T>, adam: Option<&AdamState<T>>) -> Vec<u8> {
    let mut tensors: Vec<(String, &[usize], &[T])> = params
        .ids()
        .map(|id| (params.name(id).to_string(), params.get(id).shape(), params.get(id).data()))
        .collect();
    if let Some(a) = adam {
        for id in params.ids() {
            let shape = params.get(id).shape();
            tensors.push((format!("adam.m.{}", params.name(id)), shape, &a.m[id.0]));
            tensors.push((format!("adam.v.{}", params.name(id)), shape, &a.v[id.0]));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    #[derive(Serialize)]
    struct Blob<'a> {
        meta: &'a CheckpointMeta,
        adam: Option<(&'a crate::optim::AdamConfig, u64)>,
    }
    let blob = serde_json::to_vec(&Blob {
        meta,
        adam: adam.map(|a| (&a.config, a.step)),
    })
    .expect("metadata serializes");
    put_u32(&mut out, blob.len() as u32);
    out.extend_from_slice(&blob);
    put_u32(&mut out, tensors.len() as u32);
    for (name, shape, _) in &tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        put_u32(&mut out, shape.len() as u32);
        for &d in *shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, data) in &tensors {
        for &v in *data {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    #[derive(Deserialize)]
    struct Blob {
        meta: CheckpointMeta,
        adam: Option<(crate::optim::AdamConfig, u64)>,
    }
    let n = r.u32()? as usize;
    let blob: Blob = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(format!("unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestEntry { name, dtype, shape });
    }
    let mut params = ParamStore::<T>::new();
    let mut moments: Vec<(String, Vec<T>)> = Vec::new();
    for e in &manifest {
        let numel: usize = e.shape.iter().product();
        let raw = r.take(numel * e.dtype.size())?;
        let data: Vec<T> = raw
            .chunks(e.dtype.size())
            .map(|c| match e.dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        if e.name.starts_with("adam.") {
            moments.push((e.name.clone(), data));
        } else {
            params.add(e.name.clone(), Tensor::from_vec(&e.shape, data)?)?;
        }
    }
    if r.at != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint tensors"));
    }
    let adam = match blob.adam {
        Some((config, step)) => {
            let mut state = AdamState::new(config, &params);
            state.step = step;
            for (name, data) in moments {
                let (kind, pname) = name[5..].split_once('.').ok_or_else(|| Error::format("bad moment name"))?;
                let id = params
                    .find(pname)
                    .ok_or_else(|| Error::format(format!("moment for unknown parameter {pname}")))?;
                match kind {
                    "m" => state.m[id.0] = data,
                    "v" => state.v[id.0] = data,
                    _ => return Err(Error::format(format!("unknown moment kind {kind}"))),
                }
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta: blob.meta,
        params,
        adam,
    })
}

/// Write atomically (temporary file, then rename).
pub fn save<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(&encode(meta, params, adam))?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
