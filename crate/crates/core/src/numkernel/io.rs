//! Tensor files.
//!
//! `NXT1`: magic, `u8` rank, `rank x u32` LE dims, row-major `f32` LE values.
//! `NXTD`: same header with `f64` values, used where state must round-trip
//! exactly (optimizer and training resume state).

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const NXT1_MAGIC: &[u8; 4] = b"NXT1";
pub const NXTD_MAGIC: &[u8; 4] = b"NXTD";

fn header(magic: &[u8; 4], t: &Tensor, value_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + value_bytes * t.len());
    out.extend_from_slice(magic);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_nxt1(t: &Tensor) -> Vec<u8> {
    let mut out = header(NXT1_MAGIC, t, 4);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_nxtd(t: &Tensor) -> Vec<u8> {
    let mut out = header(NXTD_MAGIC, t, 8);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_with(bytes: &[u8], magic: &[u8; 4], width: usize) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != magic {
        return Err(Error::Data(format!(
            "not a {} tensor file",
            String::from_utf8_lossy(magic)
        )));
    }
    let rank = bytes[4] as usize;
    if rank > Tensor::MAX_RANK {
        return Err(Error::Data(format!("tensor rank {rank} exceeds 4")));
    }
    let body = 5 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::Data("truncated tensor header".into()));
    }
    let dims: Vec<usize> = bytes[5..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != body + n * width {
        return Err(Error::Data(format!(
            "tensor payload is {} bytes, expected {}",
            bytes.len() - body,
            n * width
        )));
    }
    let data = bytes[body..]
        .chunks_exact(width)
        .map(|c| match width {
            4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Tensor::new(&dims, data)
}

pub fn decode_nxt1(bytes: &[u8]) -> Result<Tensor> {
    decode_with(bytes, NXT1_MAGIC, 4)
}

pub fn decode_nxtd(bytes: &[u8]) -> Result<Tensor> {
    decode_with(bytes, NXTD_MAGIC, 8)
}

pub fn write_nxt1(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_nxt1(t))?;
    Ok(())
}

pub fn read_nxt1(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_nxt1(&fs::read(path)?)
}

pub fn write_nxtd(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_nxtd(t))?;
    Ok(())
}

pub fn read_nxtd(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_nxtd(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode_nxt1(&t);
        assert_eq!(&bytes[..4], b"NXT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[17..21], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 21);
        assert_eq!(decode_nxt1(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(decode_nxt1(b"NXT2\x00").is_err());
        let mut bytes = encode_nxt1(&Tensor::zeros(&[3]));
        bytes.pop();
        assert!(decode_nxt1(&bytes).is_err());
        assert!(decode_nxtd(&encode_nxt1(&Tensor::zeros(&[1]))).is_err());
    }

    #[test]
    fn exact_format_roundtrips_f64() {
        let t = Tensor::new(&[3], vec![0.1, 1.0 / 3.0, -1e-300]).unwrap();
        assert_eq!(decode_nxtd(&encode_nxtd(&t)).unwrap(), t);
    }
}
