//! Whole-canvas denoised estimates and scores built from patch evaluations.
//!
//! The PaDIS assemblers cut the canvas along one non-overlapping partition,
//! denoise every patch independently, and set the border to zero. Because
//! the patches are disjoint the Jacobian of the assembled denoiser is block
//! diagonal, so its VJP is a scatter of per-patch VJPs. The overlap
//! assemblers use one fixed overlapping grid for every noise level and
//! either average or overwrite where patches overlap.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{extract_border, extract_patches, CanvasLayout, PartitionSpec};
use crate::image::{Image, Shape};
use crate::scoremodel::{tweedie_score, Denoiser, Linearization, Placement};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    /// One uniformly random partition per call.
    PadisStochastic,
    /// Average over all `M²` partitions.
    PadisFullAverage,
    /// Fixed overlapping grid, overlapping outputs averaged.
    OverlapAverage { overlap: usize },
    /// Fixed overlapping grid, later patches (raster order) overwrite earlier ones.
    OverlapStitch { overlap: usize },
    /// The model is called once on the whole canvas.
    WholeCanvas,
}

impl AssemblyMode {
    pub fn name(&self) -> &'static str {
        match self {
            AssemblyMode::PadisStochastic => "padis_stochastic",
            AssemblyMode::PadisFullAverage => "padis_full_average",
            AssemblyMode::OverlapAverage { .. } => "overlap_average",
            AssemblyMode::OverlapStitch { .. } => "overlap_stitch",
            AssemblyMode::WholeCanvas => "whole_canvas",
        }
    }
}

/// Draws `(i, j)` uniformly from `[1, M]²`.
pub fn random_partition(layout: &CanvasLayout, rng: &mut impl Rng) -> PartitionSpec {
    let m = layout.pad();
    let i = rng.gen_range(1..=m);
    let j = rng.gen_range(1..=m);
    layout.partition(i, j).expect("offsets drawn inside [1, M]")
}

fn check_output(out: &Image, input: &Image) -> Result<()> {
    if out.shape() != input.shape() {
        return Err(Error::shape(
            format!("model output {}", input.shape()),
            out.shape(),
        ));
    }
    Ok(())
}

/// Scatter of per-patch denoised outputs for one partition; the border is
/// denoised to zero.
pub fn assembled_denoise<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    spec: &PartitionSpec,
) -> Result<Image> {
    let layout = spec.layout();
    layout.check_canvas(canvas)?;
    let p = spec.patch();
    let side = layout.canvas_side();
    let outputs = spec
        .origins()
        .into_par_iter()
        .map(|(row, col)| {
            let patch = canvas.crop(row, col, p, p)?;
            let d = model.denoise(&patch, sigma, Some(Placement::new(row, col, side)))?;
            check_output(&d, &patch)?;
            Ok((row, col, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Image::zeros(canvas.shape());
    for (row, col, d) in &outputs {
        out.paste(d, *row, *col)?;
    }
    Ok(out)
}

/// Per-patch Tweedie scores plus the border score `-x_B / sigma^2`.
pub fn assembled_score<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    spec: &PartitionSpec,
) -> Result<Image> {
    let d = assembled_denoise(canvas, sigma, model, spec)?;
    tweedie_score(&d, canvas, sigma)
}

/// Block-diagonal VJP of `assembled_denoise`; zero on the border.
pub fn assembled_denoise_vjp<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    spec: &PartitionSpec,
    v: &Image,
) -> Result<Image> {
    let layout = spec.layout();
    layout.check_canvas(canvas)?;
    canvas.ensure_same_shape(v)?;
    let p = spec.patch();
    let side = layout.canvas_side();
    let grads = spec
        .origins()
        .into_par_iter()
        .map(|(row, col)| {
            let patch = canvas.crop(row, col, p, p)?;
            let vp = v.crop(row, col, p, p)?;
            let g = model.vjp(&patch, sigma, Some(Placement::new(row, col, side)), &vp)?;
            Ok((row, col, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Image::zeros(canvas.shape());
    for (row, col, g) in &grads {
        out.paste(g, *row, *col)?;
    }
    Ok(out)
}

/// Score for one uniformly drawn partition, returned with that partition.
pub fn stochastic_partition_score<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    layout: &CanvasLayout,
    rng: &mut impl Rng,
) -> Result<(Image, PartitionSpec)> {
    let spec = random_partition(layout, rng);
    Ok((assembled_score(canvas, sigma, model, &spec)?, spec))
}

/// `1/M² Σ_{i,j}` of the assembled denoiser over every partition.
pub fn full_average_denoise<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    layout: &CanvasLayout,
) -> Result<Image> {
    let mut acc = Image::zeros(canvas.shape());
    for spec in layout.partitions() {
        acc.axpy(1.0, &assembled_denoise(canvas, sigma, model, &spec)?)?;
    }
    let m = layout.pad() as f64;
    Ok(acc.scale(1.0 / (m * m)))
}

/// The normalized double sum over partitions of whole-canvas scores.
pub fn full_average_score<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    layout: &CanvasLayout,
) -> Result<Image> {
    let mut acc = Image::zeros(canvas.shape());
    for spec in layout.partitions() {
        acc.axpy(1.0, &assembled_score(canvas, sigma, model, &spec)?)?;
    }
    let m = layout.pad() as f64;
    Ok(acc.scale(1.0 / (m * m)))
}

/// Squared denoising errors of one noisy canvas under a fixed partition,
/// split into one term per patch (raster order) and the border term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub patches: Vec<f64>,
    pub border: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.patches.iter().sum::<f64>() + self.border
    }
}

/// Evaluates `|D(x + n) - x|²` patch by patch. The border denoiser is
/// identically zero, so the border term is `|x_B|²`.
pub fn partition_loss_terms<M: Denoiser + ?Sized>(
    clean: &Image,
    noise: &Image,
    sigma: f64,
    model: &M,
    spec: &PartitionSpec,
) -> Result<LossTerms> {
    clean.ensure_same_shape(noise)?;
    let noisy = clean.add(noise)?;
    let side = spec.layout().canvas_side();
    let targets = extract_patches(clean, spec)?;
    let inputs = extract_patches(&noisy, spec)?;
    let patches = inputs
        .iter()
        .zip(&targets)
        .map(|(input, target)| {
            let at = Placement::new(input.row, input.col, side);
            let d = model.denoise(&input.image, sigma, Some(at))?;
            let r = d.sub(&target.image)?;
            Ok(r.dot(&r)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let border = extract_border(clean, spec)?.values.iter().map(|v| v * v).sum();
    Ok(LossTerms { patches, border })
}

/// Patch origins along one axis of an overlapping grid: stride
/// `patch - overlap`, with the last patch flush against the far edge.
pub fn overlap_origins(side: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= patch {
        return Err(Error::InvalidParameter(format!(
            "overlap {overlap} must be smaller than patch {patch}"
        )));
    }
    if patch > side || patch == 0 {
        return Err(Error::Geometry(format!(
            "patches of side {patch} cannot cover a canvas of side {side}"
        )));
    }
    let stride = patch - overlap;
    let mut origins: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch < side).collect();
    origins.push(side - patch);
    origins.dedup();
    Ok(origins)
}

/// Number of grid patches covering each canvas pixel.
pub fn overlap_coverage(side: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    let origins = overlap_origins(side, patch, overlap)?;
    let mut axis = vec![0usize; side];
    for &o in &origins {
        for c in &mut axis[o..o + patch] {
            *c += 1;
        }
    }
    if axis.contains(&0) {
        return Err(Error::Geometry("overlap grid does not cover the canvas".into()));
    }
    Ok((0..side * side).map(|k| axis[k / side] * axis[k % side]).collect())
}

fn grid_pieces(side: usize, patch: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let origins = overlap_origins(side, patch, overlap)?;
    Ok(origins
        .iter()
        .flat_map(|&r| origins.iter().map(move |&c| (r, c)))
        .collect())
}

pub fn overlap_average_denoise<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    patch: usize,
    overlap: usize,
) -> Result<Image> {
    let asm = Assembler::new_for_side(canvas.height(), patch, AssemblyMode::OverlapAverage { overlap })?;
    Ok(asm.estimate(model, canvas, sigma, &mut NoRng, false)?.denoised)
}

pub fn overlap_stitch_denoise<M: Denoiser + ?Sized>(
    canvas: &Image,
    sigma: f64,
    model: &M,
    patch: usize,
    overlap: usize,
) -> Result<Image> {
    let asm = Assembler::new_for_side(canvas.height(), patch, AssemblyMode::OverlapStitch { overlap })?;
    Ok(asm.estimate(model, canvas, sigma, &mut NoRng, false)?.denoised)
}

/// Placeholder RNG for modes that draw nothing.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic assembly mode drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic assembly mode drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic assembly mode drew a random number")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("deterministic assembly mode drew a random number")
    }
}

/// How each piece contributes to the canvas.
#[derive(Clone, Debug)]
enum Blend {
    /// Disjoint pieces, each pasted with the given weight.
    Disjoint(f64),
    /// Pixel weights `1 / coverage` over the canvas.
    Average(Image),
    /// Per-piece ownership masks over the canvas (last writer wins).
    Stitch(Vec<Image>),
}

struct Piece {
    row: usize,
    col: usize,
    size: usize,
}

/// A denoised canvas together with what is needed for its VJP.
pub struct Estimate<'m> {
    pub denoised: Image,
    /// Partition used, for the single-partition mode.
    pub partition: Option<PartitionSpec>,
    sigma: f64,
    x: Image,
    cached: Option<Vec<Box<dyn Linearization + 'm>>>,
}

impl Estimate<'_> {
    /// Tweedie score of the assembled estimate.
    pub fn score(&self) -> Result<Image> {
        tweedie_score(&self.denoised, &self.x, self.sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Assembles whole-canvas estimates for one canvas geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assembler {
    layout: Option<CanvasLayout>,
    side: usize,
    inner: usize,
    patch: usize,
    mode: AssemblyMode,
}

impl Assembler {
    pub fn new(layout: CanvasLayout, mode: AssemblyMode) -> Result<Self> {
        let side = layout.canvas_side();
        if let AssemblyMode::OverlapAverage { overlap } | AssemblyMode::OverlapStitch { overlap } = mode {
            overlap_coverage(side, layout.patch(), overlap)?;
        }
        Ok(Self {
            layout: Some(layout),
            side,
            inner: layout.n(),
            patch: layout.patch(),
            mode,
        })
    }

    /// Overlap or whole-canvas assembler for an arbitrary square canvas.
    pub fn new_for_side(side: usize, patch: usize, mode: AssemblyMode) -> Result<Self> {
        match mode {
            AssemblyMode::OverlapAverage { overlap } | AssemblyMode::OverlapStitch { overlap } => {
                overlap_coverage(side, patch, overlap)?;
            }
            AssemblyMode::WholeCanvas => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "partition modes need a canvas layout".into(),
                ))
            }
        }
        Ok(Self {
            layout: None,
            side,
            inner: side,
            patch,
            mode,
        })
    }

    pub fn mode(&self) -> AssemblyMode {
        self.mode
    }

    pub fn layout(&self) -> Option<CanvasLayout> {
        self.layout
    }

    pub fn canvas_side(&self) -> usize {
        self.side
    }

    /// Side of the image region inside the padding frame.
    pub fn inner_side(&self) -> usize {
        self.inner
    }

    fn margin(&self) -> usize {
        (self.side - self.inner) / 2
    }

    pub fn crop_inner(&self, canvas: &Image) -> Result<Image> {
        let m = self.margin();
        canvas.crop(m, m, self.inner, self.inner)
    }

    /// Places an inner-sized image in an otherwise zero canvas.
    pub fn embed_inner(&self, inner: &Image) -> Result<Image> {
        if inner.height() != self.inner || inner.width() != self.inner {
            return Err(Error::shape(format!("{0}x{0} image", self.inner), inner.shape()));
        }
        let mut canvas = Image::zeros(Shape::square(self.side, inner.channels()));
        canvas.paste(inner, self.margin(), self.margin())?;
        Ok(canvas)
    }

    /// Zeroes everything outside the inner region.
    pub fn clear_frame(&self, canvas: &Image) -> Result<Image> {
        self.embed_inner(&self.crop_inner(canvas)?)
    }

    fn pieces(&self, partition: Option<&PartitionSpec>) -> Result<(Vec<Piece>, Blend)> {
        let piece = |(row, col): (usize, usize), size| Piece { row, col, size };
        match self.mode {
            AssemblyMode::PadisStochastic => {
                let spec = partition.expect("stochastic mode always records its partition");
                let p = spec.patch();
                Ok((spec.origins().into_iter().map(|o| piece(o, p)).collect(), Blend::Disjoint(1.0)))
            }
            AssemblyMode::PadisFullAverage => {
                let layout = self.layout.expect("partition modes carry a layout");
                let m = layout.pad() as f64;
                let p = layout.patch();
                let pieces = layout
                    .partitions()
                    .flat_map(|s| s.origins())
                    .map(|o| piece(o, p))
                    .collect();
                Ok((pieces, Blend::Disjoint(1.0 / (m * m))))
            }
            AssemblyMode::OverlapAverage { overlap } => {
                let coverage = overlap_coverage(self.side, self.patch, overlap)?;
                let weights = Image::new(
                    Shape::square(self.side, 1),
                    coverage.iter().map(|&c| 1.0 / c as f64).collect(),
                )?;
                let pieces = grid_pieces(self.side, self.patch, overlap)?
                    .into_iter()
                    .map(|o| piece(o, self.patch))
                    .collect();
                Ok((pieces, Blend::Average(weights)))
            }
            AssemblyMode::OverlapStitch { overlap } => {
                let origins = grid_pieces(self.side, self.patch, overlap)?;
                let mut owner = vec![usize::MAX; self.side * self.side];
                for (k, &(r, c)) in origins.iter().enumerate() {
                    for y in r..r + self.patch {
                        for x in c..c + self.patch {
                            owner[y * self.side + x] = k;
                        }
                    }
                }
                let masks = (0..origins.len())
                    .map(|k| {
                        Image::new(
                            Shape::square(self.side, 1),
                            owner.iter().map(|&o| (o == k) as u8 as f64).collect(),
                        )
                        .expect("mask shape")
                    })
                    .collect();
                let pieces = origins.into_iter().map(|o| piece(o, self.patch)).collect();
                Ok((pieces, Blend::Stitch(masks)))
            }
            AssemblyMode::WholeCanvas => Ok((vec![piece((0, 0), self.side)], Blend::Disjoint(1.0))),
        }
    }

    /// Denoises the canvas. With `linearize` the per-piece forward state is
    /// kept so that a following `vjp` does not recompute it.
    pub fn estimate<'m, M: Denoiser + ?Sized>(
        &self,
        model: &'m M,
        x: &Image,
        sigma: f64,
        rng: &mut impl Rng,
        linearize: bool,
    ) -> Result<Estimate<'m>> {
        if x.height() != self.side || x.width() != self.side {
            return Err(Error::shape(format!("{0}x{0} canvas", self.side), x.shape()));
        }
        let partition = match self.mode {
            AssemblyMode::PadisStochastic => Some(random_partition(
                &self.layout.expect("partition modes carry a layout"),
                rng,
            )),
            _ => None,
        };
        let (pieces, blend) = self.pieces(partition.as_ref())?;
        let side = self.side;
        let evaluated = pieces
            .par_iter()
            .map(|pc| {
                let input = x.crop(pc.row, pc.col, pc.size, pc.size)?;
                let at = Some(Placement::new(pc.row, pc.col, side));
                if linearize {
                    let lin = model.linearize(&input, sigma, at)?;
                    check_output(lin.output(), &input)?;
                    Ok((None, Some(lin)))
                } else {
                    let d = model.denoise(&input, sigma, at)?;
                    check_output(&d, &input)?;
                    Ok((Some(d), None))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let mut denoised = Image::zeros(x.shape());
        let mut cached = linearize.then(Vec::new);
        for (k, (pc, (d, lin))) in pieces.iter().zip(evaluated).enumerate() {
            let out = d.as_ref().unwrap_or_else(|| lin.as_ref().unwrap().output());
            match &blend {
                Blend::Disjoint(w) if *w == 1.0 => denoised.paste(out, pc.row, pc.col)?,
                Blend::Disjoint(w) => denoised.add_window(&out.scale(*w), pc.row, pc.col)?,
                Blend::Average(weights) => {
                    let w = weights.crop(pc.row, pc.col, pc.size, pc.size)?;
                    denoised.add_window(&scale_by_plane(out, &w), pc.row, pc.col)?;
                }
                Blend::Stitch(masks) => {
                    let m = masks[k].crop(pc.row, pc.col, pc.size, pc.size)?;
                    denoised.add_window(&scale_by_plane(out, &m), pc.row, pc.col)?;
                }
            }
            if let (Some(c), Some(l)) = (cached.as_mut(), lin) {
                c.push(l);
            }
        }
        Ok(Estimate {
            denoised,
            partition,
            sigma,
            x: x.clone(),
            cached,
        })
    }

    /// `v^T dD/dx` of the assembled denoiser at the estimate's input.
    pub fn vjp<M: Denoiser + ?Sized>(&self, model: &M, est: &Estimate<'_>, v: &Image) -> Result<Image> {
        est.x.ensure_same_shape(v)?;
        let (pieces, blend) = self.pieces(est.partition.as_ref())?;
        let side = self.side;
        let grads = pieces
            .par_iter()
            .enumerate()
            .map(|(k, pc)| {
                let vp = v.crop(pc.row, pc.col, pc.size, pc.size)?;
                let vp = match &blend {
                    Blend::Disjoint(w) if *w == 1.0 => vp,
                    Blend::Disjoint(w) => vp.scale(*w),
                    Blend::Average(weights) => {
                        scale_by_plane(&vp, &weights.crop(pc.row, pc.col, pc.size, pc.size)?)
                    }
                    Blend::Stitch(masks) => {
                        scale_by_plane(&vp, &masks[k].crop(pc.row, pc.col, pc.size, pc.size)?)
                    }
                };
                match &est.cached {
                    Some(c) => c[k].vjp(&vp),
                    None => {
                        let input = est.x.crop(pc.row, pc.col, pc.size, pc.size)?;
                        model.vjp(&input, est.sigma, Some(Placement::new(pc.row, pc.col, side)), &vp)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Image::zeros(v.shape());
        for (pc, g) in pieces.iter().zip(&grads) {
            out.add_window(g, pc.row, pc.col)?;
        }
        Ok(out)
    }
}

fn scale_by_plane(img: &Image, plane: &Image) -> Image {
    let n = img.height() * img.width();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for (o, w) in out.data_mut()[c * n..(c + 1) * n].iter_mut().zip(plane.data()) {
            *o *= w;
        }
    }
    out
}

/// A denoiser bound to an assembler: the only view of the prior that the
/// samplers get.
pub struct Prior<'m> {
    assembler: Assembler,
    model: &'m dyn Denoiser,
}

impl<'m> Prior<'m> {
    pub fn new(assembler: Assembler, model: &'m dyn Denoiser) -> Self {
        Self { assembler, model }
    }

    pub fn assembler(&self) -> &Assembler {
        &self.assembler
    }

    pub fn canvas_side(&self) -> usize {
        self.assembler.canvas_side()
    }

    pub fn inner_side(&self) -> usize {
        self.assembler.inner_side()
    }

    pub fn estimate(
        &self,
        x: &Image,
        sigma: f64,
        rng: &mut impl Rng,
        linearize: bool,
    ) -> Result<Estimate<'m>> {
        self.assembler.estimate(self.model, x, sigma, rng, linearize)
    }

    pub fn vjp(&self, est: &Estimate<'_>, v: &Image) -> Result<Image> {
        self.assembler.vjp(self.model, est, v)
    }
}
