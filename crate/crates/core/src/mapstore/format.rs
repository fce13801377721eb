//! Binary embedding matrix: `S2CEMB1` magic, then `version, rows, cols, dim`
//! as little-endian u32, then `rows·cols·dim` little-endian f32 values in
//! row-major cell order.

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 7] = b"S2CEMB1";
pub const STORE_FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = STORE_MAGIC.len() + 4 * 4;

/// Exact size of an encoded grid.
pub fn payload_len(rows: usize, cols: usize, dim: usize) -> usize {
    HEADER_LEN + rows * cols * dim * 4
}

pub fn encode(rows: usize, cols: usize, values: &Array2<f32>) -> Result<Vec<u8>> {
    if values.nrows() != rows * cols {
        return Err(Error::domain(format!(
            "{} embedding rows for a {rows}x{cols} grid",
            values.nrows()
        )));
    }
    let dim = values.ncols();
    let mut out = Vec::with_capacity(payload_len(rows, cols, dim));
    out.extend_from_slice(STORE_MAGIC);
    for v in [STORE_FORMAT_VERSION, rows as u32, cols as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decoded `(rows, cols, values)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Array2<f32>)> {
    if bytes.len() < HEADER_LEN || &bytes[..STORE_MAGIC.len()] != STORE_MAGIC {
        return Err(Error::Format("not an embedding store (bad magic)".into()));
    }
    let word = |i: usize| {
        let at = STORE_MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    let (version, rows, cols, dim) = (word(0), word(1), word(2), word(3));
    if version != STORE_FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported store version {version}")));
    }
    let expect = payload_len(rows, cols, dim);
    if bytes.len() != expect {
        return Err(Error::Format(format!("store is {} bytes, header implies {expect}", bytes.len())));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = Array2::from_shape_vec((rows * cols, dim), values).expect("length checked");
    Ok((rows, cols, m))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
