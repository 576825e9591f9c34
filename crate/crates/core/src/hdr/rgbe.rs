//! Radiance `.hdr` (RGBE) reading and writing.
//!
//! Files are written flat (4 bytes per pixel, no run-length encoding). The
//! reader accepts flat scanlines and the adaptive run-length scanline
//! encoding most other tools produce.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result, RgbeError};

use super::HdrImage;

/// Shared-exponent encoding of one pixel. All-zero (and vanishingly small)
/// pixels encode as `[0, 0, 0, 0]`.
pub fn encode_rgbe_pixel(rgb: [f64; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    if max < 1e-38 {
        return [0, 0, 0, 0];
    }
    // smallest e with max < 2^e
    let mut e = max.log2().floor() as i32 + 1;
    if max >= 2f64.powi(e) {
        e += 1;
    } else if max < 2f64.powi(e - 1) {
        e -= 1;
    }
    let e = e.clamp(-128, 127);
    let f = 256.0 / 2f64.powi(e);
    let m = |c: f64| (c * f).floor().clamp(0.0, 255.0) as u8;
    [m(rgb[0]), m(rgb[1]), m(rgb[2]), (e + 128) as u8]
}

pub fn decode_rgbe_pixel(p: [u8; 4]) -> [f64; 3] {
    if p[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(i32::from(p[3]) - 128 - 8);
    [(f64::from(p[0]) + 0.5) * f, (f64::from(p[1]) + 0.5) * f, (f64::from(p[2]) + 0.5) * f]
}

pub fn write_rgbe<W: Write>(h: &HdrImage, mut sink: W) -> Result<()> {
    let io = |e| Error::io("<rgbe sink>", e);
    write!(sink, "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {} +X {}\n", h.height(), h.width()).map_err(io)?;
    let mut buf = Vec::with_capacity(h.height() * h.width() * 4);
    for px in h.data().chunks_exact(3) {
        buf.extend_from_slice(&encode_rgbe_pixel([px[0], px[1], px[2]]));
    }
    sink.write_all(&buf).map_err(io)?;
    sink.flush().map_err(io)
}

pub fn write_rgbe_file(h: &HdrImage, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rgbe(h, BufWriter::new(f)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_rgbe_file(path: &Path) -> Result<HdrImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rgbe(BufReader::new(f))
}

pub fn read_rgbe<R: Read>(mut source: R) -> Result<HdrImage> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(|e| Error::io("<rgbe source>", e))?;
    let (height, width, body) = parse_header(&bytes)?;
    let pixels = decode_body(body, height, width)?;
    let mut data = Vec::with_capacity(height * width * 3);
    for p in pixels.chunks_exact(4) {
        data.extend_from_slice(&decode_rgbe_pixel([p[0], p[1], p[2], p[3]]));
    }
    Ok(HdrImage::new(height, width, data)?)
}

fn malformed(msg: impl Into<String>) -> Error {
    RgbeError::MalformedHeader(msg.into()).into()
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("unterminated header line"))?;
        *pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| malformed("header is not text"))
    };
    let magic = next_line(&mut pos)?;
    if magic.trim_end() != "#?RADIANCE" {
        return Err(malformed(format!("expected `#?RADIANCE`, found `{}`", magic.trim_end())));
    }
    let mut format_ok = false;
    loop {
        let line = next_line(&mut pos)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(malformed(format!("unsupported format `{fmt}`")));
            }
            format_ok = true;
        }
    }
    if !format_ok {
        return Err(malformed("missing FORMAT=32-bit_rle_rgbe"));
    }
    let res = next_line(&mut pos)?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (height, width) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>().map_err(|_| malformed(format!("bad height `{h}`")))?,
            w.parse::<usize>().map_err(|_| malformed(format!("bad width `{w}`")))?,
        ),
        _ => return Err(malformed(format!("unsupported resolution line `{}`", res.trim_end()))),
    };
    if height == 0 || width == 0 {
        return Err(malformed(format!("empty resolution {height}x{width}")));
    }
    Ok((height, width, &bytes[pos..]))
}

fn decode_body(body: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(height * width * 4);
    let mut pos = 0;
    for _ in 0..height {
        let rest = &body[pos..];
        let is_rle = (8..0x8000).contains(&width) && rest.len() >= 4 && rest[0] == 2 && rest[1] == 2 && rest[2] & 0x80 == 0;
        if is_rle {
            let encoded_width = (usize::from(rest[2]) << 8) | usize::from(rest[3]);
            if encoded_width != width {
                return Err(RgbeError::ResolutionMismatch(format!(
                    "scanline encodes width {encoded_width}, header says {width}"
                ))
                .into());
            }
            pos += 4 + decode_rle_scanline(&rest[4..], width, &mut out)?;
        } else {
            let need = width * 4;
            if rest.len() < need {
                let expected = height * width * 4;
                return Err(RgbeError::Truncated { expected, found: out.len() + rest.len() }.into());
            }
            out.extend_from_slice(&rest[..need]);
            pos += need;
        }
    }
    if pos != body.len() {
        return Err(RgbeError::ResolutionMismatch(format!(
            "{} bytes of pixel data remain after {height}x{width} pixels",
            body.len() - pos
        ))
        .into());
    }
    Ok(out)
}

/// Decodes the four run-length channel planes of one scanline; returns the
/// number of bytes consumed.
fn decode_rle_scanline(data: &[u8], width: usize, out: &mut Vec<u8>) -> Result<usize> {
    let truncated = |pos: usize| -> Error { RgbeError::Truncated { expected: pos + 1, found: data.len() }.into() };
    let mut planes = vec![0u8; width * 4];
    let mut pos = 0;
    for c in 0..4 {
        let mut x = 0;
        while x < width {
            let count = *data.get(pos).ok_or_else(|| truncated(pos))? as usize;
            pos += 1;
            if count > 128 {
                let run = count - 128;
                let v = *data.get(pos).ok_or_else(|| truncated(pos))?;
                pos += 1;
                if x + run > width {
                    return Err(RgbeError::ResolutionMismatch("run overflows scanline".into()).into());
                }
                for i in 0..run {
                    planes[(x + i) * 4 + c] = v;
                }
                x += run;
            } else {
                if count == 0 || x + count > width {
                    return Err(RgbeError::ResolutionMismatch("literal overflows scanline".into()).into());
                }
                if pos + count > data.len() {
                    return Err(truncated(pos + count - 1));
                }
                for i in 0..count {
                    planes[(x + i) * 4 + c] = data[pos + i];
                }
                pos += count;
                x += count;
            }
        }
    }
    out.extend_from_slice(&planes);
    Ok(pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pixel_encodes_as_zero() {
        assert_eq!(encode_rgbe_pixel([0.0; 3]), [0, 0, 0, 0]);
        assert_eq!(decode_rgbe_pixel([0, 0, 0, 0]), [0.0; 3]);
    }

    #[test]
    fn unit_pixel_bytes() {
        assert_eq!(encode_rgbe_pixel([1.0, 1.0, 1.0]), [128, 128, 128, 129]);
    }

    #[test]
    fn exponent_boundaries() {
        // 0.5 = 0.5 * 2^0 -> e = 0, mantissa 128
        assert_eq!(encode_rgbe_pixel([0.5, 0.0, 0.0]), [128, 0, 0, 128]);
        // just below a power of two stays in the lower exponent
        let p = encode_rgbe_pixel([0.999_999, 0.0, 0.0]);
        assert_eq!(p[3], 128);
        assert_eq!(p[0], 255);
    }

    #[test]
    fn file_roundtrip_and_header() {
        let img = HdrImage::from_fn(3, 5, |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.37).unwrap();
        let mut buf = Vec::new();
        write_rgbe(&img, &mut buf).unwrap();
        assert!(buf.starts_with(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 3 +X 5\n"));
        assert_eq!(buf.len(), b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 3 +X 5\n".len() + 60);
        let back = read_rgbe(&buf[..]).unwrap();
        assert_eq!((back.height(), back.width()), (3, 5));
    }

    #[test]
    fn grey_radiance_roundtrip_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..1000).map(|_| rng.random_range(1e-6..100.0)).collect();
        let img = HdrImage::new(1, 1000, vals.iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
        let mut buf = Vec::new();
        write_rgbe(&img, &mut buf).unwrap();
        let back = read_rgbe(&buf[..]).unwrap();
        let worst = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs() / a)
            .fold(0.0, f64::max);
        assert!(worst <= 0.01, "worst relative error {worst}");
    }

    #[test]
    fn distinct_parse_errors() {
        let bad_magic = b"#?RGBX\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 1\n\0\0\0\0";
        assert!(matches!(read_rgbe(&bad_magic[..]), Err(Error::Rgbe(RgbeError::MalformedHeader(_)))));
        let no_format = b"#?RADIANCE\n\n-Y 1 +X 1\n\0\0\0\0";
        assert!(matches!(read_rgbe(&no_format[..]), Err(Error::Rgbe(RgbeError::MalformedHeader(_)))));
        let bad_res = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n+Y 1 +X 1\n\0\0\0\0";
        assert!(matches!(read_rgbe(&bad_res[..]), Err(Error::Rgbe(RgbeError::MalformedHeader(_)))));
        let truncated = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 1\n\0\0\0\0\0";
        assert!(matches!(read_rgbe(&truncated[..]), Err(Error::Rgbe(RgbeError::Truncated { .. }))));
        let extra = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 1\n\0\0\0\0\0\0\0\0";
        assert!(matches!(read_rgbe(&extra[..]), Err(Error::Rgbe(RgbeError::ResolutionMismatch(_)))));
    }

    #[test]
    fn reads_run_length_scanlines() {
        // width 8, one scanline: every channel is a single run of 8
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 8\n".to_vec();
        bytes.extend_from_slice(&[2, 2, 0, 8]);
        for v in [128u8, 64, 32, 129] {
            bytes.extend_from_slice(&[128 + 8, v]);
        }
        let img = read_rgbe(&bytes[..]).unwrap();
        let want = decode_rgbe_pixel([128, 64, 32, 129]);
        for x in 0..8 {
            assert_eq!(img.pixel(0, x), want);
        }
        // header width disagrees with the encoded scanline width
        let mut wrong = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 9\n".to_vec();
        wrong.extend_from_slice(&[2, 2, 0, 8]);
        assert!(matches!(read_rgbe(&wrong[..]), Err(Error::Rgbe(RgbeError::ResolutionMismatch(_)))));
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded_by_pixel_max(r in 0.0f64..100.0, g in 0.0f64..100.0, b in 0.0f64..100.0) {
            let px = [r, g, b];
            let back = decode_rgbe_pixel(encode_rgbe_pixel(px));
            let max = r.max(g).max(b);
            for c in 0..3 {
                if max > 1e-30 {
                    prop_assert!((back[c] - px[c]).abs() <= 0.01 * max);
                }
            }
            // the dominant channel keeps 1% relative accuracy
            if max > 1e-30 {
                let i = (0..3).max_by(|&a, &b| px[a].total_cmp(&px[b])).unwrap();
                prop_assert!((back[i] - px[i]).abs() / px[i] <= 0.01);
            }
        }
    }
}
