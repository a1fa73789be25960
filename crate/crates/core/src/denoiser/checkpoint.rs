//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! | field | type |
//! |-------|------|
//! | magic `PADISNET` | 8 bytes |
//! | version | u32 |
//! | image channels, width, depth | u32 ×3 |
//! | activation code, positional flag | u8 ×2 |
//! | inner image side `N`, patch size `P` | u32 ×2 |
//! | seed, iterations | u64 ×2 |
//! | parameter count | u64 |
//! | raw parameters | f32 × count |
//! | EMA parameters | f32 × count |
//!
//! Parameters are laid out per layer as weights `[out][in][3][3]` then biases.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::net::{Activation, NetArch, PatchDenoiserNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PADISNET";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: NetArch,
    pub n: usize,
    pub patch: usize,
    pub raw: Vec<f32>,
    pub ema: Vec<f32>,
    pub seed: u64,
    pub iterations: u64,
}

impl Checkpoint {
    pub fn new(
        arch: NetArch,
        n: usize,
        patch: usize,
        raw: &[f64],
        ema: &[f64],
        seed: u64,
        iterations: u64,
    ) -> Self {
        Self {
            arch,
            n,
            patch,
            raw: raw.iter().map(|&v| v as f32).collect(),
            ema: ema.iter().map(|&v| v as f32).collect(),
            seed,
            iterations,
        }
    }

    /// Rebuilds the network from the EMA weights (or the raw ones).
    pub fn network(&self, use_ema: bool) -> Result<PatchDenoiserNet> {
        let src = if use_ema { &self.ema } else { &self.raw };
        PatchDenoiserNet::new(self.arch, src.iter().map(|&v| v as f64).collect())
    }

    /// Same weights with the positional planes switched off or on.
    pub fn with_positional(mut self, positional: bool) -> Self {
        self.arch.positional = positional;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.raw.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.arch.image_channels, self.arch.width, self.arch.depth] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.arch.activation.code());
        out.push(self.arch.positional as u8);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.patch as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iterations.to_le_bytes());
        out.extend_from_slice(&(self.raw.len() as u64).to_le_bytes());
        for block in [&self.raw, &self.ema] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let image_channels = r.u32()? as usize;
        let width = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let activation = Activation::from_code(r.u8()?)?;
        let positional = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad positional flag {b}"))),
        };
        let arch = NetArch {
            image_channels,
            width,
            depth,
            activation,
            positional,
        };
        arch.validate()?;
        let n = r.u32()? as usize;
        let patch = r.u32()? as usize;
        let seed = r.u64()?;
        let iterations = r.u64()?;
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} parameters, architecture needs {}",
                arch.param_count()
            )));
        }
        let raw = r.f32s(count)?;
        let ema = r.f32s(count)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            arch,
            n,
            patch,
            raw,
            ema,
            seed,
            iterations,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch() -> NetArch {
        NetArch {
            image_channels: 1,
            width: 3,
            depth: 2,
            activation: Activation::Silu,
            positional: false,
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip(seed in any::<u64>(), iters in any::<u64>(), vals in proptest::collection::vec(-1e3f32..1e3, 1..4)) {
            let n = arch().param_count();
            let raw: Vec<f32> = (0..n).map(|i| vals[i % vals.len()] * i as f32).collect();
            let ema: Vec<f32> = raw.iter().map(|v| v * 0.5).collect();
            let ck = Checkpoint { arch: arch(), n: 32, patch: 8, raw, ema, seed, iterations: iters };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let n = arch().param_count();
        let ck = Checkpoint::new(arch(), 32, 8, &vec![0.5; n], &vec![0.25; n], 1, 2);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
