//! Planar real-valued images.
//!
//! Pixels are stored channel-major (`c`, then row, then column), so every
//! channel plane is a contiguous row-major slice.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn square(side: usize, channels: usize) -> Self {
        Self::new(side, side, channels)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                data.len(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(height, width, 1), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for r in 0..shape.height {
                for col in 0..shape.width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.shape.height + row) * self.shape.width + col
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let i = self.index(c, row, col);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(shape, self.shape));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        self.ensure_shape(other.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `height`×`width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.shape.height || col + width > self.shape.width {
            return Err(Error::Geometry(format!(
                "window {height}x{width} at ({row},{col}) exceeds {}",
                self.shape
            )));
        }
        let shape = Shape::new(height, width, self.shape.channels);
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..self.shape.channels {
            for r in row..row + height {
                let start = self.index(c, r, col);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Image { shape, data })
    }

    /// Overwrites the window at `(row, col)` with `src`.
    pub fn paste(&mut self, src: &Image, row: usize, col: usize) -> Result<()> {
        self.check_window(src, row, col)?;
        for c in 0..src.channels() {
            for r in 0..src.height() {
                let dst = self.index(c, row + r, col);
                let s = src.index(c, r, 0);
                self.data[dst..dst + src.width()].copy_from_slice(&src.data[s..s + src.width()]);
            }
        }
        Ok(())
    }

    /// Adds `src` into the window at `(row, col)`.
    pub fn add_window(&mut self, src: &Image, row: usize, col: usize) -> Result<()> {
        self.check_window(src, row, col)?;
        for c in 0..src.channels() {
            for r in 0..src.height() {
                let dst = self.index(c, row + r, col);
                let s = src.index(c, r, 0);
                for (d, v) in self.data[dst..dst + src.width()]
                    .iter_mut()
                    .zip(&src.data[s..s + src.width()])
                {
                    *d += v;
                }
            }
        }
        Ok(())
    }

    fn check_window(&self, src: &Image, row: usize, col: usize) -> Result<()> {
        if src.channels() != self.channels()
            || row + src.height() > self.height()
            || col + src.width() > self.width()
        {
            return Err(Error::Geometry(format!(
                "window {} at ({row},{col}) does not fit {}",
                src.shape, self.shape
            )));
        }
        Ok(())
    }

    /// Zero-pads by `pad` pixels on all four sides.
    pub fn zero_pad(&self, pad: usize) -> Image {
        let shape = Shape::new(
            self.height() + 2 * pad,
            self.width() + 2 * pad,
            self.channels(),
        );
        let mut out = Image::zeros(shape);
        out.paste(self, pad, pad).expect("padded canvas always fits");
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other)?;
        Ok(Image {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Image) -> Result<()> {
        self.ensure_same_shape(x)?;
        for (d, v) in self.data.iter_mut().zip(&x.data) {
            *d += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
