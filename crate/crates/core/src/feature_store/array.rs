//! Single-array binary files.
//!
//! Layout (little-endian): magic `PCMF`, `u32` version (1), `u8` dtype code
//! (0 = float32), `u8` rank, `rank × u32` dims, then the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCMF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayF32 {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArrayF32 {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "array payload does not match dims");
        Self { dims, data }
    }
}

pub fn encode(array: &ArrayF32) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * array.dims.len() + 4 * array.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(u8::try_from(array.dims.len()).expect("rank fits in u8"));
    for &d in &array.dims {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    for &v in &array.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayF32> {
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut small = [0u8; 2];
    r.read_exact(&mut small).map_err(|_| bad("truncated header"))?;
    if small[0] != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {}", small[0])));
    }
    let rank = small[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(|_| bad("truncated dims"))?;
        dims.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = dims.iter().product();
    if r.len() != 4 * n {
        return Err(bad(&format!("payload holds {} bytes, dims {:?} need {}", r.len(), dims, 4 * n)));
    }
    let data = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(ArrayF32 { dims, data })
}

pub fn write_array(path: &Path, array: &ArrayF32) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(array))?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayF32> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let a = ArrayF32::new(vec![2, 1], vec![1.0, -2.5]);
        let bytes = encode(&a);
        assert_eq!(&bytes[..4], b"PCMF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..14], &[2, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[1, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 26);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), a);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = encode(&ArrayF32::new(vec![3], vec![1.0, 2.0, 3.0]));
        bytes.pop();
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }
}
