//! Sinogram files.
//!
//! A one-line text header `PADIS-SINOGRAM views=<V> detectors=<D> format=<csv|f32>`
//! is followed either by `V` lines of `D` comma-separated values, or by
//! `V·D` little-endian `f32` values in view-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

const TAG: &str = "PADIS-SINOGRAM";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SinogramFormat {
    Csv,
    F32,
}

impl SinogramFormat {
    fn name(self) -> &'static str {
        match self {
            SinogramFormat::Csv => "csv",
            SinogramFormat::F32 => "f32",
        }
    }
}

pub fn encode(sino: &Image, format: SinogramFormat) -> Result<Vec<u8>> {
    if sino.channels() != 1 {
        return Err(Error::Unsupported("sinograms have one channel".into()));
    }
    let (views, dets) = (sino.height(), sino.width());
    let mut out = format!("{TAG} views={views} detectors={dets} format={}\n", format.name()).into_bytes();
    match format {
        SinogramFormat::Csv => {
            for row in sino.data().chunks(dets) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                out.extend_from_slice(line.join(",").as_bytes());
                out.push(b'\n');
            }
        }
        SinogramFormat::F32 => {
            for v in sino.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("sinogram header missing".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Format("sinogram header is not UTF-8".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(TAG) {
        return Err(Error::Format("not a sinogram file".into()));
    }
    let (mut views, mut dets, mut format) = (None, None, None);
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {f:?}")))?;
        let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad {k} value {v:?}")));
        match k {
            "views" => views = Some(num()?),
            "detectors" => dets = Some(num()?),
            "format" => {
                format = Some(match v {
                    "csv" => SinogramFormat::Csv,
                    "f32" => SinogramFormat::F32,
                    _ => return Err(Error::Format(format!("unknown sinogram format {v:?}"))),
                })
            }
            _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
        }
    }
    let missing = |name: &str| Error::Format(format!("sinogram header lacks {name}"));
    let views = views.ok_or_else(|| missing("views"))?;
    let dets = dets.ok_or_else(|| missing("detectors"))?;
    let body = &bytes[newline + 1..];
    let data: Vec<f64> = match format.ok_or_else(|| missing("format"))? {
        SinogramFormat::Csv => {
            let text = std::str::from_utf8(body).map_err(|_| Error::Format("CSV body is not UTF-8".into()))?;
            let mut data = Vec::with_capacity(views * dets);
            for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let row: Vec<f64> = line
                    .split(',')
                    .map(|t| t.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
                if row.len() != dets {
                    return Err(Error::Format(format!(
                        "line {} has {} values, expected {dets}",
                        i + 2,
                        row.len()
                    )));
                }
                data.extend(row);
            }
            data
        }
        SinogramFormat::F32 => {
            if body.len() != 4 * views * dets {
                return Err(Error::Format(format!(
                    "raw body holds {} bytes, expected {}",
                    body.len(),
                    4 * views * dets
                )));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
    };
    if data.len() != views * dets {
        return Err(Error::Format(format!(
            "sinogram holds {} values, expected {}",
            data.len(),
            views * dets
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("sinogram contains non-finite values".into()));
    }
    Image::new(Shape::new(views, dets, 1), data)
}

pub fn write(path: impl AsRef<Path>, sino: &Image, format: SinogramFormat) -> Result<()> {
    fs::write(path, encode(sino, format)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    decode(&fs::read(path)?)
}
