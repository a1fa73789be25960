use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

use super::{LinearOperator, Measurement};

/// Parallel-beam geometry: `views` angles evenly spaced over `[0, π)` and a
/// flat detector of `detectors` bins centred on the rotation axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtGeometry {
    pub views: usize,
    pub detectors: usize,
    /// Bin width in pixel units.
    pub spacing: f64,
}

impl CtGeometry {
    pub fn new(views: usize, detectors: usize, spacing: f64) -> Result<Self> {
        if views == 0 {
            return Err(Error::Geometry("CT geometry needs at least one view".into()));
        }
        if detectors == 0 || !(spacing > 0.0) {
            return Err(Error::Geometry(format!(
                "bad detector: {detectors} bins of width {spacing}"
            )));
        }
        Ok(Self {
            views,
            detectors,
            spacing,
        })
    }

    /// The desk default: 96 unit bins, enough for a 64×64 image's diagonal.
    pub fn desk(views: usize) -> Result<Self> {
        Self::new(views, 96, 1.0)
    }

    pub fn angle(&self, view: usize) -> f64 {
        PI * view as f64 / self.views as f64
    }

    /// Signed distance of detector bin `d` from the rotation axis.
    pub fn offset(&self, d: usize) -> f64 {
        (d as f64 - (self.detectors as f64 - 1.0) / 2.0) * self.spacing
    }

    pub fn sinogram_shape(&self) -> Shape {
        Shape::new(self.views, self.detectors, 1)
    }
}

/// Ray-driven (Joseph) projector. Each ray steps through the image one row
/// or column at a time along its dominant axis and interpolates linearly
/// between the two nearest pixels; the weights are stored once and reused
/// for the transpose.
#[derive(Clone, Debug)]
pub struct Radon {
    n: usize,
    geom: CtGeometry,
    starts: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
}

impl Radon {
    pub fn new(n: usize, geom: CtGeometry) -> Result<Self> {
        if n == 0 {
            return Err(Error::Geometry("empty image".into()));
        }
        let diagonal = n as f64 * 2f64.sqrt();
        if (geom.detectors as f64) * geom.spacing < diagonal {
            return Err(Error::Geometry(format!(
                "{} bins of width {} do not cover the {n}x{n} image diagonal",
                geom.detectors, geom.spacing
            )));
        }
        let centre = (n as f64 - 1.0) / 2.0;
        let mut starts = Vec::with_capacity(geom.views * geom.detectors + 1);
        let mut pixels = Vec::new();
        let mut weights = Vec::new();
        for v in 0..geom.views {
            let (s, c) = geom.angle(v).sin_cos();
            for d in 0..geom.detectors {
                starts.push(pixels.len());
                let t = geom.offset(d);
                if c.abs() >= s.abs() {
                    // march over rows; pixel (r, col) sits at x = col - centre, y = centre - r
                    let step = 1.0 / c.abs();
                    for r in 0..n {
                        let y = centre - r as f64;
                        let fc = (t - y * s) / c + centre;
                        push_pair(&mut pixels, &mut weights, fc, n, step, |col| r * n + col);
                    }
                } else {
                    let step = 1.0 / s.abs();
                    for col in 0..n {
                        let x = col as f64 - centre;
                        let fr = centre - (t - x * c) / s;
                        push_pair(&mut pixels, &mut weights, fr, n, step, |r| r * n + col);
                    }
                }
            }
        }
        starts.push(pixels.len());
        Ok(Self {
            n,
            geom,
            starts,
            pixels,
            weights,
        })
    }

    pub fn geometry(&self) -> &CtGeometry {
        &self.geom
    }

    pub fn image_side(&self) -> usize {
        self.n
    }

    fn ray(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.starts[k]..self.starts[k + 1];
        self.pixels[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&p, &w)| (p as usize, w))
    }
}

/// Linear interpolation weights at fractional index `f` along one line.
fn push_pair(
    pixels: &mut Vec<u32>,
    weights: &mut Vec<f64>,
    f: f64,
    n: usize,
    step: f64,
    index: impl Fn(usize) -> usize,
) {
    let lo = f.floor();
    let frac = f - lo;
    for (i, w) in [(lo, 1.0 - frac), (lo + 1.0, frac)] {
        if i >= 0.0 && i < n as f64 && w > 0.0 {
            pixels.push(index(i as usize) as u32);
            weights.push(w * step);
        }
    }
}

impl LinearOperator for Radon {
    fn name(&self) -> &str {
        "radon"
    }
    fn input_shape(&self) -> Shape {
        Shape::square(self.n, 1)
    }
    fn output_shape(&self) -> Shape {
        self.geom.sinogram_shape()
    }
    fn apply(&self, x: &Image) -> Result<Measurement> {
        x.ensure_shape(self.input_shape())?;
        let src = x.data();
        let data = (0..self.geom.views * self.geom.detectors)
            .map(|k| self.ray(k).map(|(p, w)| w * src[p]).sum())
            .collect();
        Image::new(self.output_shape(), data)
    }
    fn adjoint(&self, y: &Measurement) -> Result<Image> {
        y.ensure_shape(self.output_shape())?;
        let mut out = Image::zeros(self.input_shape());
        let dst = out.data_mut();
        for (k, &yk) in y.data().iter().enumerate() {
            for (p, w) in self.ray(k) {
                dst[p] += w * yk;
            }
        }
        Ok(out)
    }
}
