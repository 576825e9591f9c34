//! Lossless fixture format: 16-byte header (`HRF1`, height, width, channels
//! as little-endian u32) followed by planar little-endian f32 samples.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::HdrImage;

pub const RAW_FLOAT_MAGIC: [u8; 4] = *b"HRF1";

fn io(e: std::io::Error) -> Error {
    Error::io("<raw-float stream>", e)
}

/// Writes `[channels, h, w]` planar data. `data` must hold
/// `channels * height * width` values.
pub fn write_raw_planes<W: Write>(mut sink: W, height: usize, width: usize, channels: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), height * width * channels);
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(&RAW_FLOAT_MAGIC);
    for d in [height, width, channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    sink.write_all(&buf).map_err(io)?;
    sink.flush().map_err(io)
}

/// Reads any channel count as a `[1, channels, h, w]` tensor.
pub fn read_raw_planes<R: Read>(mut source: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 16 || bytes[..4] != RAW_FLOAT_MAGIC {
        return Err(Error::RawFloat("missing HRF1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::RawFloat(format!("{h}x{w}x{c} needs {} payload bytes, found {}", 4 * n, bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect();
    Ok(Tensor::new(vec![1, c, h, w], data))
}

pub fn write_raw_float<W: Write>(h: &HdrImage, sink: W) -> Result<()> {
    let t = h.to_tensor();
    write_raw_planes(sink, h.height(), h.width(), 3, t.data())
}

pub fn read_raw_float<R: Read>(source: R) -> Result<HdrImage> {
    let t = read_raw_planes(source)?;
    if t.dim(1) != 3 {
        return Err(Error::RawFloat(format!("expected 3 channels, found {}", t.dim(1))));
    }
    HdrImage::from_tensor(&t, 0)
}
