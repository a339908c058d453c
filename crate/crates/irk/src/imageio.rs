//! Raw image files: a 16-byte header of four little-endian `u32`
//! (channels, height, width, dtype) followed by little-endian `f32` pixels in
//! CHW order. dtype 0 is the only one defined.

use std::fs;
use std::path::Path;

use irk_core::Tensor;

use crate::error::{format_err, io_err, Result};

pub const HEADER_LEN: usize = 16;
pub const DTYPE_F32: u32 = 0;

pub fn encode(image: &Tensor<f32>) -> Vec<u8> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        s => panic!("images are CHW or HW, got {s:?}"),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * image.numel());
    for v in [c as u32, h as u32, w as u32, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `bytes`; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "image shorter than its 16-byte header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let (c, h, w, dtype) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
    if dtype != DTYPE_F32 {
        return Err(format_err(path, format!("unsupported image dtype {dtype}")));
    }
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| format_err(path, "image shape overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(format_err(
            path,
            format!("{c}x{h}x{w} needs {} payload bytes, found {}", 4 * n, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new([c, h, w], data)?)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(image)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_round_trip() {
        let img = Tensor::from_fn([3, 2, 4], |i| i as f32 * 0.5 - 3.0);
        let bytes = encode(&img);
        assert_eq!(bytes.len(), 16 + 24 * 4);
        assert_eq!(&bytes[..16], &[3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), img);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = encode(&Tensor::zeros([1, 2, 2]));
        assert!(decode(&bytes[..10], Path::new("x")).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut other = bytes.clone();
        other[12] = 1;
        assert!(decode(&other, Path::new("x")).is_err());
    }
}
