use crate::error::{Error, Result};
use crate::image::{Image, Shape};

use super::{LinearOperator, Measurement};

/// Uniform `K × K` blur with symmetric (edge-repeating) boundary extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxBlur {
    shape: Shape,
    kernel: usize,
}

impl BoxBlur {
    pub fn new(shape: Shape, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!("blur kernel side {kernel} must be odd")));
        }
        if shape.height == 0 || shape.width == 0 {
            return Err(Error::Geometry("cannot blur an empty image".into()));
        }
        Ok(Self { shape, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

/// Index of `i` after symmetric extension of `[0, n)`: `-1 -> 0`, `n -> n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// 1-D running box filter along lines of `len` samples spaced `stride` apart.
fn box_lines(src: &[f64], dst: &mut [f64], lines: usize, len: usize, line_step: usize, stride: usize, k: usize, transpose: bool) {
    let half = (k / 2) as isize;
    let w = 1.0 / k as f64;
    for l in 0..lines {
        let base = l * line_step;
        for i in 0..len {
            for o in -half..=half {
                let j = reflect(i as isize + o, len);
                if transpose {
                    dst[base + j * stride] += w * src[base + i * stride];
                } else {
                    dst[base + i * stride] += w * src[base + j * stride];
                }
            }
        }
    }
}

impl BoxBlur {
    fn run(&self, x: &Image, transpose: bool) -> Image {
        let (h, w) = (self.shape.height, self.shape.width);
        let mut out = Image::zeros(self.shape);
        for c in 0..self.shape.channels {
            let src = x.plane(c);
            let mut tmp = vec![0.0; h * w];
            // along rows, then along columns; the two passes commute
            box_lines(src, &mut tmp, h, w, w, 1, self.kernel, transpose);
            box_lines(&tmp, out.plane_mut(c), w, h, 1, w, self.kernel, transpose);
        }
        out
    }
}

impl LinearOperator for BoxBlur {
    fn name(&self) -> &str {
        "blur"
    }
    fn input_shape(&self) -> Shape {
        self.shape
    }
    fn output_shape(&self) -> Shape {
        self.shape
    }
    fn apply(&self, x: &Image) -> Result<Measurement> {
        x.ensure_shape(self.shape)?;
        Ok(self.run(x, false))
    }
    fn adjoint(&self, y: &Measurement) -> Result<Image> {
        y.ensure_shape(self.shape)?;
        Ok(self.run(y, true))
    }
}

/// Average pooling over non-overlapping `f × f` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Downsample {
    shape: Shape,
    factor: usize,
}

impl Downsample {
    pub fn new(shape: Shape, factor: usize) -> Result<Self> {
        if factor == 0 || shape.height % factor != 0 || shape.width % factor != 0 {
            return Err(Error::Geometry(format!(
                "factor {factor} does not divide a {}x{} image",
                shape.height, shape.width
            )));
        }
        Ok(Self { shape, factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Each measurement copied into its whole block, scaled by `gain`.
    fn replicate(&self, y: &Measurement, gain: f64) -> Result<Image> {
        y.ensure_shape(self.output_shape())?;
        let f = self.factor;
        Ok(Image::from_fn(self.shape, |c, r, col| gain * y.at(c, r / f, col / f)))
    }
}

impl LinearOperator for Downsample {
    fn name(&self) -> &str {
        "downsample"
    }
    fn input_shape(&self) -> Shape {
        self.shape
    }
    fn output_shape(&self) -> Shape {
        Shape::new(
            self.shape.height / self.factor,
            self.shape.width / self.factor,
            self.shape.channels,
        )
    }
    fn apply(&self, x: &Image) -> Result<Measurement> {
        x.ensure_shape(self.shape)?;
        let f = self.factor;
        let mut out = Image::zeros(self.output_shape());
        let inv = 1.0 / (f * f) as f64;
        for c in 0..self.shape.channels {
            for r in 0..self.shape.height {
                for col in 0..self.shape.width {
                    let i = out.index(c, r / f, col / f);
                    out.data_mut()[i] += inv * x.at(c, r, col);
                }
            }
        }
        Ok(out)
    }
    fn adjoint(&self, y: &Measurement) -> Result<Image> {
        self.replicate(y, 1.0 / (self.factor * self.factor) as f64)
    }
    fn has_pinv(&self) -> bool {
        true
    }
    fn pinv(&self, y: &Measurement) -> Result<Image> {
        self.replicate(y, 1.0)
    }
}
