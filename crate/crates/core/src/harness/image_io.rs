//! 8-bit image files: PNG through the `png` crate, and binary or ASCII
//! PNM (PBM/PGM/PPM). Formats are detected from the leading bytes on read
//! and chosen by extension on write (`.pbm`, `.pgm`, `.ppm` or PNG).

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::quantize;
use crate::tensor::{Element, Tensor};

/// Foreground threshold for ground-truth and mask files.
pub const BINARY_THRESHOLD: u8 = 128;

/// Interleaved 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}×{height}×{channels} image with {} bytes",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Integer Rec. 601 luma for RGB, identity for gray.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8)
            .collect();
        Image {
            channels: 1,
            data,
            ..*self
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    /// `1×C×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[1, c, self.height, self.width], |i| {
            T::from_f64_lossy(self.data[(i % plane) * c + i / plane] as f64 / 255.0)
        })
    }

    /// Gray image thresholded at [`BINARY_THRESHOLD`], row-major.
    pub fn to_binary(&self) -> Vec<bool> {
        self.to_gray().data.iter().map(|&v| v >= BINARY_THRESHOLD).collect()
    }

    /// Gray image from a `1×1×H×W` map in `[0, 1]`, rounded to 8 bits.
    pub fn from_map<T: Element>(map: &Tensor<T>) -> Result<Image> {
        let (n, c, h, w) = map.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::shape("from_map", format!("expected 1×1×H×W, got {:?}", map.shape())));
        }
        let data = map.data().iter().map(|v| quantize(v.to_f64_lossy())).collect();
        Image::new(w, h, 1, data)
    }

    pub fn from_binary(mask: &[bool], width: usize, height: usize) -> Result<Image> {
        Image::new(width, height, 1, mask.iter().map(|&b| if b { 255 } else { 0 }).collect())
    }
}

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(|m| image_err(path, m))
    } else if bytes.len() >= 2 && bytes[0] == b'P' && (b'1'..=b'6').contains(&bytes[1]) {
        decode_pnm(&bytes).map_err(|m| image_err(path, m))
    } else {
        Err(image_err(path, "unrecognized image format"))
    }
}

/// Writes `img`; a `.pbm` target requires a gray image and thresholds it.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pbm") => encode_pbm(img),
        Some("pgm" | "ppm") => Ok(encode_pnm(img)),
        _ => encode_png(img, false),
    }
    .map_err(|m| image_err(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a binary mask as a 1-bit image (1-bit PNG unless `.pbm`).
pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let img = Image::from_binary(mask, width, height)?;
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("pbm") => encode_pbm(&img),
        _ => encode_png(&img, true),
    }
    .map_err(|m| image_err(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err("unexpanded palette image".into()),
    };
    Image::new(w, h, channels, data).map_err(|e| e.to_string())
}

fn encode_png(img: &Image, one_bit: bool) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        let data = if one_bit && img.channels == 1 {
            enc.set_depth(png::BitDepth::One);
            pack_bits(img)
        } else {
            enc.set_depth(png::BitDepth::Eight);
            img.data.clone()
        };
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&data).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Rows of MSB-first bits, each row padded to a byte; set = value ≥ 128.
fn pack_bits(img: &Image) -> Vec<u8> {
    let stride = img.width.div_ceil(8);
    let mut out = vec![0u8; stride * img.height];
    for y in 0..img.height {
        for x in 0..img.width {
            if img.data[y * img.width + x] >= BINARY_THRESHOLD {
                out[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    out
}

fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn encode_pbm(img: &Image) -> std::result::Result<Vec<u8>, String> {
    if img.channels != 1 {
        return Err("PBM output needs a gray image".into());
    }
    let mut out = format!("P4\n{} {}\n", img.width, img.height).into_bytes();
    // PBM uses 1 for black; foreground is written white
    out.extend(pack_bits(img).iter().map(|b| !b));
    Ok(out)
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| "malformed PNM header".to_string())
    }

    /// One bit of a plain PBM: a single `0` or `1`, whitespace optional.
    fn bit(&mut self) -> std::result::Result<bool, String> {
        self.skip_space();
        let b = self.bytes.get(self.pos).copied();
        self.pos += 1;
        match b {
            Some(b'0') => Ok(false),
            Some(b'1') => Ok(true),
            _ => Err("malformed PBM data".into()),
        }
    }
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let kind = bytes[1];
    let mut cur = PnmCursor { bytes, pos: 2 };
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = if matches!(kind, b'1' | b'4') { 1 } else { cur.number()? };
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err("unsupported PNM header".into());
    }
    let channels = if matches!(kind, b'3' | b'6') { 3 } else { 1 };
    let count = w * h * channels;
    let scale = |v: usize| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8;
    let data: Vec<u8> = match kind {
        b'1' => (0..count)
            .map(|_| cur.bit().map(|b| if b { 0 } else { 255 }))
            .collect::<std::result::Result<_, _>>()?,
        b'2' | b'3' => (0..count)
            .map(|_| cur.number().map(scale))
            .collect::<std::result::Result<_, _>>()?,
        b'4' => {
            let body = &bytes[cur.pos + 1..];
            let stride = w.div_ceil(8);
            if body.len() < stride * h {
                return Err("truncated PBM data".into());
            }
            (0..count)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    if body[y * stride + x / 8] & (0x80 >> (x % 8)) != 0 {
                        0
                    } else {
                        255
                    }
                })
                .collect()
        }
        _ => {
            let body = &bytes[cur.pos + 1..];
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if body.len() < need {
                return Err("truncated PNM data".into());
            }
            if wide {
                body[..need]
                    .chunks_exact(2)
                    .map(|b| scale(u16::from_be_bytes([b[0], b[1]]) as usize))
                    .collect()
            } else {
                body[..need].iter().map(|&v| scale(v as usize)).collect()
            }
        }
    };
    Image::new(w, h, channels, data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(channels: usize) -> Image {
        let (w, h) = (11, 5);
        Image::new(w, h, channels, (0..w * h * channels).map(|i| (i * 37 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn round_trips_all_writers() {
        let dir = tempfile::tempdir().unwrap();
        for (name, img) in [
            ("a.png", sample(1)),
            ("b.png", sample(3)),
            ("c.pgm", sample(1)),
            ("d.ppm", sample(3)),
        ] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img, "{name}");
        }
        let mask: Vec<bool> = (0..55).map(|i| i % 3 == 0).collect();
        for name in ["m.png", "m.pbm"] {
            let p = dir.path().join(name);
            write_mask(&p, &mask, 11, 5).unwrap();
            assert_eq!(read_image(&p).unwrap().to_binary(), mask, "{name}");
        }
    }

    #[test]
    fn plain_pnm_variants() {
        let p2 = b"P2\n# comment\n2 2\n15\n0 15\n7 8\n";
        let img = decode_pnm(p2).unwrap();
        assert_eq!(img.data, vec![0, 255, 119, 136]);
        let p1 = b"P1\n3 1\n1 0 1\n";
        assert_eq!(decode_pnm(p1).unwrap().data, vec![0, 255, 0]);
        assert!(decode_pnm(b"P5\n2 2\n255\n\x01").is_err());
    }

    #[test]
    fn tensor_conversions() {
        let img = Image::new(2, 1, 3, vec![255, 0, 51, 0, 255, 102]).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
        let map = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(Image::from_map(&map).unwrap().data, vec![0, 128, 255]);
        assert_eq!(img.to_gray().data, vec![82, 161]);
    }

    #[test]
    fn unknown_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        fs::write(&p, b"GIF89a").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Image { .. })));
        assert!(matches!(read_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
