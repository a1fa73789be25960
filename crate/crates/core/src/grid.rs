//! Zero-padded canvases and their non-overlapping patch partitions.
//!
//! An `N`×`N` image is padded by `M = (k+1)P - N` pixels on every side, with
//! `k = floor(N/P)`. For each pair of 1-based offsets `(i, j)` in `[1, M]²`
//! the square of side `(k+1)P` whose top-left corner is `(i-1, j-1)` is cut
//! into `(k+1)²` patches of side `P`; everything outside that square is the
//! border region. Every partition covers the central image exactly once.

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

/// Returns `(k, M)` for an `n`×`n` image cut into patches of side `p`.
///
/// ```
/// assert_eq!(padis::grid::make_partition(256, 56).unwrap(), (4, 24));
/// ```
pub fn make_partition(n: usize, p: usize) -> Result<(usize, usize)> {
    if p < 1 || p >= n {
        return Err(Error::Geometry(format!(
            "patch side {p} must satisfy 1 <= P < N = {n}"
        )));
    }
    let k = n / p;
    Ok((k, (k + 1) * p - n))
}

/// Geometry shared by every partition of one padded canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CanvasLayout {
    n: usize,
    patch: usize,
    k: usize,
    pad: usize,
}

impl CanvasLayout {
    pub fn new(n: usize, patch: usize) -> Result<Self> {
        let (k, pad) = make_partition(n, patch)?;
        Ok(Self { n, patch, k, pad })
    }

    /// Side of the central image.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Padding width `M`, which is also the number of distinct offsets per axis.
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn canvas_side(&self) -> usize {
        self.n + 2 * self.pad
    }

    /// Side of the square tiled by the patches, `(k+1)P`.
    pub fn covered_side(&self) -> usize {
        (self.k + 1) * self.patch
    }

    pub fn patches_per_side(&self) -> usize {
        self.k + 1
    }

    pub fn canvas_shape(&self, channels: usize) -> Shape {
        Shape::square(self.canvas_side(), channels)
    }

    pub fn partition(&self, i: usize, j: usize) -> Result<PartitionSpec> {
        PartitionSpec::new(*self, i, j)
    }

    /// All `M²` partitions, `i` outermost.
    pub fn partitions(&self) -> impl Iterator<Item = PartitionSpec> + '_ {
        let m = self.pad;
        (1..=m).flat_map(move |i| (1..=m).map(move |j| PartitionSpec { layout: *self, i, j }))
    }

    /// Zero-pads a central image onto a fresh canvas.
    pub fn pad_image(&self, inner: &Image) -> Result<Image> {
        if inner.height() != self.n || inner.width() != self.n {
            return Err(Error::shape(
                format!("{0}x{0} image", self.n),
                inner.shape(),
            ));
        }
        Ok(inner.zero_pad(self.pad))
    }

    /// Central `N`×`N` crop of a canvas.
    pub fn crop_center(&self, canvas: &Image) -> Result<Image> {
        self.check_canvas(canvas)?;
        canvas.crop(self.pad, self.pad, self.n, self.n)
    }

    /// Places a central image into an otherwise zero canvas.
    pub fn embed_center(&self, inner: &Image) -> Result<Image> {
        self.pad_image(inner)
    }

    pub fn check_canvas(&self, canvas: &Image) -> Result<()> {
        let side = self.canvas_side();
        if canvas.height() != side || canvas.width() != side {
            return Err(Error::shape(format!("{side}x{side} canvas"), canvas.shape()));
        }
        Ok(())
    }

    /// True for pixels outside the central image.
    pub fn in_frame(&self, row: usize, col: usize) -> bool {
        let lo = self.pad;
        let hi = self.pad + self.n;
        row < lo || row >= hi || col < lo || col >= hi
    }
}

/// A zero-padded image together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedImage {
    layout: CanvasLayout,
    canvas: Image,
}

impl PaddedImage {
    pub fn new(inner: &Image, patch: usize) -> Result<Self> {
        if inner.height() != inner.width() {
            return Err(Error::Unsupported(format!(
                "only square images are supported, got {}",
                inner.shape()
            )));
        }
        let layout = CanvasLayout::new(inner.height(), patch)?;
        let canvas = layout.pad_image(inner)?;
        Ok(Self { layout, canvas })
    }

    pub fn layout(&self) -> CanvasLayout {
        self.layout
    }

    pub fn canvas(&self) -> &Image {
        &self.canvas
    }

    pub fn canvas_mut(&mut self) -> &mut Image {
        &mut self.canvas
    }

    pub fn into_canvas(self) -> Image {
        self.canvas
    }

    pub fn inner(&self) -> Image {
        self.layout
            .crop_center(&self.canvas)
            .expect("canvas matches its own layout")
    }
}

/// One partition `(i, j)` of a padded canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionSpec {
    layout: CanvasLayout,
    i: usize,
    j: usize,
}

impl PartitionSpec {
    pub fn new(layout: CanvasLayout, i: usize, j: usize) -> Result<Self> {
        let m = layout.pad();
        if !(1..=m).contains(&i) || !(1..=m).contains(&j) {
            return Err(Error::Geometry(format!(
                "offsets ({i},{j}) outside [1,{m}]"
            )));
        }
        Ok(Self { layout, i, j })
    }

    pub fn layout(&self) -> CanvasLayout {
        self.layout
    }

    pub fn i(&self) -> usize {
        self.i
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn patch(&self) -> usize {
        self.layout.patch()
    }

    pub fn patch_count(&self) -> usize {
        let s = self.layout.patches_per_side();
        s * s
    }

    /// Top-left corner of the covered square (0-based).
    pub fn covered_origin(&self) -> (usize, usize) {
        (self.i - 1, self.j - 1)
    }

    /// Top-left canvas corners of the patches, row-major over the grid.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let p = self.patch();
        let (r0, c0) = self.covered_origin();
        let s = self.layout.patches_per_side();
        (0..s)
            .flat_map(|a| (0..s).map(move |b| (r0 + a * p, c0 + b * p)))
            .collect()
    }

    pub fn is_border(&self, row: usize, col: usize) -> bool {
        let (r0, c0) = self.covered_origin();
        let side = self.layout.covered_side();
        row < r0 || row >= r0 + side || col < c0 || col >= c0 + side
    }
}

/// A patch cut from a canvas, remembering where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub row: usize,
    pub col: usize,
}

pub fn extract_patches(canvas: &Image, spec: &PartitionSpec) -> Result<Vec<Patch>> {
    spec.layout.check_canvas(canvas)?;
    let p = spec.patch();
    spec.origins()
        .into_iter()
        .map(|(row, col)| {
            Ok(Patch {
                image: canvas.crop(row, col, p, p)?,
                row,
                col,
            })
        })
        .collect()
}

/// Writes patches back at their recorded locations.
pub fn scatter_patches(canvas: &mut Image, patches: &[Patch]) -> Result<()> {
    for patch in patches {
        canvas.paste(&patch.image, patch.row, patch.col)?;
    }
    Ok(())
}

/// Pixels of a canvas that no patch of a partition covers.
#[derive(Clone, Debug, PartialEq)]
pub struct BorderRegion {
    /// `(row, col)` in raster order.
    pub indices: Vec<(usize, usize)>,
    /// Channel-major: all indices of channel 0, then channel 1, ...
    pub values: Vec<f64>,
}

pub fn extract_border(canvas: &Image, spec: &PartitionSpec) -> Result<BorderRegion> {
    spec.layout.check_canvas(canvas)?;
    let side = spec.layout.canvas_side();
    let indices: Vec<_> = (0..side)
        .flat_map(|r| (0..side).map(move |c| (r, c)))
        .filter(|&(r, c)| spec.is_border(r, c))
        .collect();
    let values = (0..canvas.channels())
        .flat_map(|ch| indices.iter().map(move |&(r, c)| canvas.at(ch, r, c)))
        .collect();
    Ok(BorderRegion { indices, values })
}

/// Coordinate planes of a square canvas, affine in pixel index with `-1` and
/// `+1` at the outermost pixels. `x` varies along columns, `y` along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalGrid {
    side: usize,
    coords: Vec<f64>,
}

impl PositionalGrid {
    pub fn new(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::Geometry(format!("canvas side {side} < 2")));
        }
        let denom = (side - 1) as f64;
        let coords = (0..side).map(|i| -1.0 + 2.0 * i as f64 / denom).collect();
        Ok(Self { side, coords })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn coord(&self, index: usize) -> f64 {
        self.coords[index]
    }

    /// Full-canvas planes as a two-channel image `[x, y]`.
    pub fn planes(&self) -> Image {
        self.patch(0, 0, self.side).expect("whole canvas is in bounds")
    }

    /// The `[x, y]` coordinate planes of the `size`×`size` window at `(row, col)`.
    pub fn patch(&self, row: usize, col: usize, size: usize) -> Result<Image> {
        self.window(row, col, size, size)
    }

    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.side || col + width > self.side {
            return Err(Error::Geometry(format!(
                "positional window {height}x{width} at ({row},{col}) outside {0}x{0}",
                self.side
            )));
        }
        Ok(Image::from_fn(Shape::new(height, width, 2), |c, r, q| {
            if c == 0 {
                self.coords[col + q]
            } else {
                self.coords[row + r]
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes_from_padding_formula() {
        assert_eq!(make_partition(256, 56).unwrap(), (4, 24));
        assert_eq!(make_partition(256, 96).unwrap(), (2, 32));
        assert_eq!(make_partition(8, 4).unwrap(), (2, 4));
        assert!(make_partition(8, 8).is_err());
        assert!(make_partition(8, 0).is_err());
    }

    #[test]
    fn divisible_patch_side_pads_one_full_patch() {
        let layout = CanvasLayout::new(64, 16).unwrap();
        assert_eq!((layout.k(), layout.pad()), (4, 16));
        assert_eq!(layout.canvas_side(), 96);
    }

    #[test]
    fn small_example_origins() {
        let layout = CanvasLayout::new(8, 4).unwrap();
        let spec = layout.partition(1, 1).unwrap();
        let origins = spec.origins();
        assert_eq!(origins.len(), 9);
        let expected: Vec<_> = [0, 4, 8]
            .iter()
            .flat_map(|&r| [0, 4, 8].iter().map(move |&c| (r, c)))
            .collect();
        assert_eq!(origins, expected);
    }

    #[test]
    fn twenty_five_patches_at_desk_size() {
        let layout = CanvasLayout::new(256, 56).unwrap();
        for (i, j) in [(1, 1), (24, 24), (7, 19)] {
            let spec = layout.partition(i, j).unwrap();
            let canvas = Image::zeros(layout.canvas_shape(1));
            assert_eq!(extract_patches(&canvas, &spec).unwrap().len(), 25);
        }
    }

    #[test]
    fn offsets_outside_range_are_rejected() {
        let layout = CanvasLayout::new(8, 4).unwrap();
        assert!(layout.partition(0, 1).is_err());
        assert!(layout.partition(1, 5).is_err());
    }

    #[test]
    fn fresh_border_is_zero_and_has_expected_size() {
        let layout = CanvasLayout::new(10, 4).unwrap();
        let inner = Image::filled(Shape::square(10, 1), 0.7);
        let canvas = layout.pad_image(&inner).unwrap();
        for spec in layout.partitions() {
            let border = extract_border(&canvas, &spec).unwrap();
            let side = layout.canvas_side();
            let covered = layout.covered_side();
            assert_eq!(border.indices.len(), side * side - covered * covered);
            assert!(border.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn border_values_follow_the_canvas() {
        let layout = CanvasLayout::new(10, 4).unwrap();
        let canvas = Image::from_fn(layout.canvas_shape(1), |_, r, c| (r * 100 + c) as f64);
        let spec = layout.partition(2, 1).unwrap();
        let border = extract_border(&canvas, &spec).unwrap();
        for (k, &(r, c)) in border.indices.iter().enumerate() {
            assert_eq!(border.values[k], canvas.at(0, r, c));
        }
    }

    #[test]
    fn scatter_inverts_extract() {
        let layout = CanvasLayout::new(12, 5).unwrap();
        let canvas = Image::from_fn(layout.canvas_shape(2), |c, r, q| (c * 1000 + r * 37 + q) as f64 * 0.1);
        let spec = layout.partition(3, 2).unwrap();
        let patches = extract_patches(&canvas, &spec).unwrap();
        let mut rebuilt = Image::zeros(canvas.shape());
        scatter_patches(&mut rebuilt, &patches).unwrap();
        for c in 0..2 {
            for r in 0..layout.canvas_side() {
                for q in 0..layout.canvas_side() {
                    let expected = if spec.is_border(r, q) { 0.0 } else { canvas.at(c, r, q) };
                    assert_eq!(rebuilt.at(c, r, q), expected);
                }
            }
        }
    }

    #[test]
    fn positional_extremes_and_symmetry() {
        let grid = PositionalGrid::new(17).unwrap();
        let planes = grid.planes();
        assert_eq!(planes.at(0, 0, 0), -1.0);
        assert_eq!(planes.at(0, 0, 16), 1.0);
        assert_eq!(planes.at(1, 16, 0), 1.0);
        assert_eq!(planes.at(0, 8, 8), 0.0);
        assert_eq!(planes.at(1, 8, 8), 0.0);

        let top = grid.patch(0, 0, 4).unwrap();
        assert_eq!(top.at(0, 0, 0), -1.0);
        assert_eq!(top.at(1, 0, 0), -1.0);

        // a patch and its vertical mirror have negated, flipped y planes
        let (a, b, p) = (2, 5, 4);
        let upper = grid.patch(a, b, p).unwrap();
        let lower = grid.patch(17 - a - p, b, p).unwrap();
        for r in 0..p {
            for c in 0..p {
                assert!((upper.at(1, r, c) + lower.at(1, p - 1 - r, c)).abs() < 1e-15);
                assert_eq!(upper.at(0, r, c), lower.at(0, r, c));
            }
        }
        assert!(grid.patch(15, 0, 4).is_err());
    }

    #[test]
    fn x_varies_along_columns_only() {
        let grid = PositionalGrid::new(6).unwrap().planes();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(grid.at(0, r, c), grid.at(0, 0, c));
                assert_eq!(grid.at(1, r, c), grid.at(1, r, 0));
            }
        }
    }
}
