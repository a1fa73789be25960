//! Binary PGM (P5) and PPM (P6) reading and writing.
//!
//! Samples map linearly between `[0, maxval]` and `[0, 1]`. Writing clamps to
//! `[0, 1]` and rounds to the nearest level. Both 8-bit and 16-bit
//! (big-endian, `maxval > 255`) samples are supported.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    fn maxval(self) -> u32 {
        match self {
            Depth::Eight => 255,
            Depth::Sixteen => 65535,
        }
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, image: &Image, depth: Depth) -> Result<()> {
    let bytes = encode(image, depth)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_from(mut reader: impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn encode(image: &Image, depth: Depth) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Unsupported(format!(
                "PNM needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let maxval = depth.maxval();
    let mut out = format!(
        "{magic}\n{} {}\n{maxval}\n",
        image.width(),
        image.height()
    )
    .into_bytes();
    let quantize = |v: f64| -> u32 {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        (v * maxval as f64).round() as u32
    };
    for r in 0..image.height() {
        for col in 0..image.width() {
            for c in 0..image.channels() {
                let q = quantize(image.at(c, r, col));
                match depth {
                    Depth::Eight => out.push(q as u8),
                    Depth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
                }
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let width = parse_uint(&next_token(bytes, &mut pos)?)?;
    let height = parse_uint(&next_token(bytes, &mut pos)?)?;
    let maxval = parse_uint(&next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let shape = Shape::new(height, width, channels);
    let needed = shape.len() * sample_bytes;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {needed} bytes")))?;
    let mut image = Image::zeros(shape);
    for (k, chunk) in raster.chunks_exact(sample_bytes).enumerate() {
        let q = if sample_bytes == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]]) as usize
        } else {
            chunk[0] as usize
        };
        if q > maxval {
            return Err(Error::Format(format!("sample {q} exceeds maxval {maxval}")));
        }
        let c = k % channels;
        let px = k / channels;
        image.set(c, px / width, px % width, q as f64 / maxval as f64);
    }
    Ok(image)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            break;
        }
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_uint(token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("expected integer in header, got {token:?}")))
}
