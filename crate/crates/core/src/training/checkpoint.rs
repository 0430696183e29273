//! Versioned binary checkpoint container.
//!
//! Layout: magic `PCMC`, u32 version, u32 metadata length, UTF-8 JSON
//! metadata, u32 array count, then per array: u32 name length, name bytes,
//! u8 dtype code, u8 rank, rank × u32 dims, little-endian payload. Dtype
//! code 0 is float32 and 1 is float64; parameters and moments are written
//! as float64 so a reload is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::Stage;
use super::optim::AdamW;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::feature_store::Dims;
use crate::model::Model;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"PCMC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub best_macro_f1: Option<f64>,
    pub dims: Dims,
    /// TOML text of the run configuration.
    pub config: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: Option<AdamW>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(2);
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(meta: &CheckpointMeta, model: &Model, optimizer: Option<&AdamW>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let json = serde_json::to_vec(meta)?;
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let mut arrays: Vec<(String, Matrix)> = model.store.iter().map(|(_, n, m)| (format!("param/{n}"), m.clone())).collect();
    if let Some(opt) = optimizer {
        for (id, name, _) in model.store.iter() {
            arrays.push((format!("adam_m/{name}"), opt.m[id].clone()));
            arrays.push((format!("adam_v/{name}"), opt.v[id].clone()));
        }
        arrays.push(("adam/steps".into(), Matrix::from_vec(1, opt.steps.len(), opt.steps.iter().map(|&s| s as f64).collect())));
        arrays.push(("adam/hyper".into(), Matrix::row_vector(&[opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay])));
    }
    put_u32(&mut out, arrays.len() as u32);
    for (name, m) in &arrays {
        put_array(&mut out, name, m);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { path: self.path.to_path_buf(), msg: msg.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn array(&mut self) -> Result<(String, Matrix)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).or_else(|_| self.fail("array name is not UTF-8"))?;
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return self.fail(format!("array {name} has rank {rank}")),
        };
        let n = rows * cols;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            DTYPE_F32 => self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            other => return self.fail(format!("array {name} has unknown dtype code {other}")),
        };
        Ok((name, Matrix::from_vec(rows, cols, data)))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let config = Config::from_toml(&meta.config)?;
    let mut model = Model::new(&config, meta.dims, meta.seed)?;
    let count = r.u32()? as usize;
    let mut arrays = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, m) = r.array()?;
        arrays.insert(name, m);
    }
    let has_optimizer = arrays.contains_key("adam/steps");
    let mut take = |key: String, shape: (usize, usize)| -> Result<Matrix> {
        match arrays.remove(&key) {
            Some(m) if m.shape() == shape => Ok(m),
            Some(m) => Err(Error::Format { path: path.to_path_buf(), msg: format!("{key} is {:?}, model expects {shape:?}", m.shape()) }),
            None => Err(Error::Format { path: path.to_path_buf(), msg: format!("{key} missing") }),
        }
    };
    let names: Vec<(usize, String, (usize, usize))> = model.store.iter().map(|(id, n, m)| (id, n.to_string(), m.shape())).collect();
    for (id, name, shape) in &names {
        *model.store.get_mut(*id) = take(format!("param/{name}"), *shape)?;
    }
    let optimizer = if has_optimizer {
        let steps = take("adam/steps".into(), (1, names.len()))?;
        let hyper = take("adam/hyper".into(), (1, 5))?;
        let h = hyper.data();
        let mut opt = AdamW::new(&model.store, h[0], h[1], h[2], h[3], h[4]);
        opt.steps = steps.data().iter().map(|&s| s as u64).collect();
        for (id, name, shape) in &names {
            opt.m[*id] = take(format!("adam_m/{name}"), *shape)?;
            opt.v[*id] = take(format!("adam_v/{name}"), *shape)?;
        }
        Some(opt)
    } else {
        None
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("unexpected array {extra}") });
    }
    Ok(Checkpoint { meta, model, optimizer })
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &Model, optimizer: Option<&AdamW>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(meta, model, optimizer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes, path)
}
