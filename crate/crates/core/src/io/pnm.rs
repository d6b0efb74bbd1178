//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape, Tensor};

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        msg: msg.into(),
    })
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(start) {
                None => parse_err(start, format!("header ends before {what}")),
                Some(_) => parse_err(start, format!("expected {what}")),
            };
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse()
            .or_else(|_| parse_err(start, format!("{what} `{text}` is out of range")))
    }
}

/// Decode a P6 image to `(1, 3, h, w)` or a P5 image to `(1, 1, h, w)`,
/// scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(_) => return parse_err(0, "magic must be P6 or P5"),
        None => return parse_err(0, "file too short for a magic number"),
    };
    let mut hd = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return parse_err(2, "expected whitespace after magic");
    }
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval_at = {
        hd.skip_space();
        hd.pos
    };
    let maxval = hd.number("maxval")?;
    if w == 0 || h == 0 {
        return parse_err(2, format!("zero image size {w}x{h}"));
    }
    if maxval != 255 {
        return parse_err(maxval_at, format!("maxval {maxval} unsupported, only 255"));
    }
    match bytes.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        Some(_) => return parse_err(hd.pos, "expected a single whitespace byte after maxval"),
        None => return parse_err(hd.pos, "header ends before pixel data"),
    }
    let need = w * h * channels;
    let data = &bytes[hd.pos..];
    if data.len() < need {
        return parse_err(
            bytes.len(),
            format!("truncated payload: {} of {need} pixel bytes", data.len()),
        );
    }
    if data.len() > need {
        return parse_err(hd.pos + need, format!("{} trailing bytes after pixel data", data.len() - need));
    }
    let plane = w * h;
    let mut out = vec![0.0f32; need];
    for (i, &b) in data.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        out[c * plane + pix] = b as f32 / 255.0;
    }
    Tensor::from_vec(Shape::new(1, channels, h, w), out)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encode item `n` of a 3-channel tensor as P6.
pub fn encode_ppm(img: &Tensor<f32>, n: usize) -> Result<Vec<u8>> {
    encode(img, n, 3, b"P6")
}

/// Encode item `n` of a 1-channel tensor as P5.
pub fn encode_pgm(img: &Tensor<f32>, n: usize) -> Result<Vec<u8>> {
    encode(img, n, 1, b"P5")
}

fn encode(img: &Tensor<f32>, n: usize, channels: usize, magic: &[u8]) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c != channels || n >= s.n {
        return Err(Error::Shape(format!(
            "cannot write item {n} of {s} as a {channels}-channel image"
        )));
    }
    let mut out = magic.to_vec();
    out.extend_from_slice(format!("\n{} {}\n255\n", s.w, s.h).as_bytes());
    let src = img.sample(n);
    let plane = s.plane();
    for pix in 0..plane {
        for c in 0..channels {
            out.push(quantize(src[c * plane + pix]));
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img, 0)?)?)
}

pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img, 0)?)?)
}

/// Mask item `n` as a {0, 255} PGM.
pub fn encode_mask(mask: &Mask<f32>, n: usize) -> Result<Vec<u8>> {
    encode_pgm(&mask.to_tensor(), n)
}

/// Mask from a PGM: pixels at or above 128 are set.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask<f32>> {
    let t = decode(bytes)?;
    if t.shape().c != 1 {
        return parse_err(0, "a mask must be a P5 image");
    }
    Mask::threshold(&t, 0.5)
}
