//! Synthetic phantom datasets standing in for CT slices and photographs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use padis::pnm::{self, Depth};
use padis::{Image, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    /// A jittered modified Shepp-Logan head plus random small lesions. The
    /// anatomy sits at roughly the same place in every image.
    SheppLogan,
    /// A body ellipse with random inner ellipses at random places.
    Ellipses,
    /// Smooth random fields from a few low-frequency cosines.
    Textures,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::SheppLogan => "shepp_logan",
            PhantomKind::Ellipses => "ellipses",
            PhantomKind::Textures => "textures",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "shepp_logan" | "ct_phantom" => Ok(PhantomKind::SheppLogan),
            "ellipses" => Ok(PhantomKind::Ellipses),
            "textures" => Ok(PhantomKind::Textures),
            _ => Err(CliError::Config(format!("unknown phantom kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub channels: usize,
    /// Random ellipse count (lesions for Shepp-Logan), uniform over
    /// `ellipses_min..=ellipses_max`.
    pub ellipses_min: usize,
    pub ellipses_max: usize,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.size < 4 {
            return Err(CliError::Config(format!("phantom size {} is too small", self.size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(CliError::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.ellipses_min > self.ellipses_max {
            return Err(CliError::Config(format!(
                "ellipse count range {}..={} is empty",
                self.ellipses_min, self.ellipses_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Image,
    /// Inner ellipses drawn; zero for textures.
    pub ellipses: usize,
}

/// The `index`-th phantom of the dataset with this seed. Every phantom has
/// its own random stream, so datasets of different lengths share a prefix.
pub fn phantom(spec: &PhantomSpec, seed: u64, index: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    match spec.kind {
        PhantomKind::SheppLogan => shepp_logan(spec, &mut rng),
        PhantomKind::Ellipses => ellipse_phantom(spec, &mut rng),
        PhantomKind::Textures => texture(spec, &mut rng),
    }
}

pub fn phantoms(spec: &PhantomSpec, seed: u64, count: usize) -> Vec<Image> {
    (0..count as u64).map(|i| phantom(spec, seed, i).image).collect()
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn ellipse_phantom(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Phantom {
    let count = rng.gen_range(spec.ellipses_min..=spec.ellipses_max);
    let body = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: rng.gen_range(0.75..0.92),
        b: rng.gen_range(0.6..0.85),
        cos: 1.0,
        sin: 0.0,
        value: rng.gen_range(0.3..0.5),
    };
    let mut shapes = vec![body];
    for _ in 0..count {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let r = rng.gen_range(0.0..0.55f64);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        shapes.push(Ellipse {
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            a: rng.gen_range(0.05..0.3),
            b: rng.gen_range(0.04..0.2),
            cos: angle.cos(),
            sin: angle.sin(),
            value: rng.gen_range(-0.25..0.45),
        });
    }
    Phantom { image: render(spec, &shapes, rng), ellipses: count }
}

/// Modified Shepp-Logan ellipses: value, semi-axes, center, angle in degrees.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

fn shepp_logan(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Phantom {
    let count = rng.gen_range(spec.ellipses_min..=spec.ellipses_max);
    let scale = rng.gen_range(0.9..1.02);
    let mut shapes: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .enumerate()
        .map(|(i, &(value, a, b, cx, cy, deg))| {
            // the skull pair keeps a common outline so the rim stays thin
            let (ja, jb, jc, jv) = if i < 2 {
                (scale, scale, 0.0, 1.0)
            } else {
                (
                    scale * rng.gen_range(0.85..1.15),
                    scale * rng.gen_range(0.85..1.15),
                    0.03,
                    rng.gen_range(0.6..1.6),
                )
            };
            let angle = (deg + if i < 2 { 0.0 } else { rng.gen_range(-8.0..8.0) }).to_radians();
            Ellipse {
                cx: scale * cx + jc * rng.gen_range(-1.0..1.0),
                cy: scale * cy + jc * rng.gen_range(-1.0..1.0),
                a: a * ja,
                b: b * jb,
                cos: angle.cos(),
                sin: angle.sin(),
                value: value * jv,
            }
        })
        .collect();
    for _ in 0..count {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let r = rng.gen_range(0.0..0.5f64);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let value = rng.gen_range(0.05..0.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        shapes.push(Ellipse {
            cx: 0.7 * r * phi.cos(),
            cy: r * phi.sin(),
            a: rng.gen_range(0.03..0.1),
            b: rng.gen_range(0.03..0.08),
            cos: angle.cos(),
            sin: angle.sin(),
            value,
        });
    }
    Phantom { image: render(spec, &shapes, rng), ellipses: count }
}
fn render(spec: &PhantomSpec, shapes: &[Ellipse], rng: &mut ChaCha8Rng) -> Image {
    let tints: Vec<[f64; 3]> = shapes
        .iter()
        .map(|_| if spec.channels == 3 { [rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)] } else { [1.0; 3] })
        .collect();
    let n = spec.size;
    // 2x2 supersampling for soft edges
    Image::from_fn(Shape::square(n, spec.channels), |ch, row, col| {
        let mut total = 0.0;
        for (sr, sc) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let x = 2.0 * (col as f64 + sc) / n as f64 - 1.0;
            let y = 1.0 - 2.0 * (row as f64 + sr) / n as f64;
            let v: f64 = shapes
                .iter()
                .zip(&tints)
                .filter(|(e, _)| e.contains(x, y))
                .map(|(e, t)| e.value * t[ch])
                .sum();
            total += v.clamp(0.0, 1.0);
        }
        total / 4.0
    })
}

fn texture(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Phantom {
    let n = spec.size as f64;
    let waves: Vec<_> = (0..8)
        .map(|_| {
            let fx = rng.gen_range(-4.0..4.0f64);
            let fy = rng.gen_range(-4.0..4.0f64);
            let amp = 1.0 / (1.0 + fx.hypot(fy));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let tint = [rng.gen_range(0.6..1.4), rng.gen_range(0.6..1.4), rng.gen_range(0.6..1.4)];
            (fx, fy, amp, phase, tint)
        })
        .collect();
    let offset = rng.gen_range(-0.3..0.3);
    let image = Image::from_fn(Shape::square(spec.size, spec.channels), |ch, row, col| {
        let (x, y) = (col as f64 / n, row as f64 / n);
        let s: f64 = waves
            .iter()
            .map(|(fx, fy, amp, phase, tint)| {
                let t = if spec.channels == 3 { tint[ch] } else { 1.0 };
                t * amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).cos()
            })
            .sum();
        0.5 + 0.5 * (1.2 * s + offset).tanh()
    });
    Phantom { image, ellipses: 0 }
}

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "file,kind,index,seed,ellipses";

fn file_name(index: usize, channels: usize) -> String {
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    format!("phantom_{index:05}.{ext}")
}

/// Writes `count` phantoms as 16-bit PGM/PPM files plus a manifest.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, seed: u64, count: usize) -> Result<(), CliError> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for i in 0..count {
        let p = phantom(spec, seed, i as u64);
        let name = file_name(i, spec.channels);
        pnm::write(dir.join(&name), &p.image, Depth::Sixteen)?;
        writeln!(manifest, "{name},{},{i},{seed},{}", spec.kind.name(), p.ellipses).unwrap();
    }
    fs::write(dir.join(MANIFEST), manifest).map_err(|e| CliError::io(dir, e))?;
    Ok(())
}

/// Image files listed in a dataset manifest, in manifest order.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(CliError::Io(format!("{}: unexpected manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let file = l.split(',').next().unwrap_or_default();
            if file.is_empty() || file.contains(['/', '\\']) {
                return Err(CliError::Io(format!("{}: bad entry {l:?}", path.display())));
            }
            Ok(dir.join(file))
        })
        .collect()
}

pub fn load_dataset(dir: &Path, limit: Option<usize>) -> Result<Vec<Image>, CliError> {
    let files = read_manifest(dir)?;
    let take = limit.unwrap_or(files.len());
    if take > files.len() {
        return Err(CliError::Config(format!(
            "{} lists {} images, {take} requested",
            dir.display(),
            files.len()
        )));
    }
    files[..take].iter().map(|f| Ok(pnm::read(f)?)).collect()
}
