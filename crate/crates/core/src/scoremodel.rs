//! The denoiser contract, score conversions, and closed-form priors used as
//! verification oracles.
//!
//! Everything here works on raw noise standard deviations `sigma`. A denoiser
//! `D(x, sigma)` estimates `E[x0 | x0 + sigma * n = x]`; the score of the
//! noisy marginal follows from Tweedie's formula, `(D - x) / sigma^2`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::PartitionSpec;
use crate::image::{Image, Shape};

/// Where a denoiser input sits on the padded canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub canvas_side: usize,
}

impl Placement {
    pub fn new(row: usize, col: usize, canvas_side: usize) -> Self {
        Self {
            row,
            col,
            canvas_side,
        }
    }

    pub fn whole(canvas_side: usize) -> Self {
        Self::new(0, 0, canvas_side)
    }
}

/// A denoiser evaluated at one input, able to pull back cotangents.
pub trait Linearization: Send + Sync {
    fn output(&self) -> &Image;
    fn vjp(&self, v: &Image) -> Result<Image>;
}

/// Anything that can denoise an image or patch at a given noise level.
///
/// `at` carries the location of the input on the padded canvas; models that
/// ignore position accept `None`.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image>;

    /// `v^T dD/dx` evaluated at `x`.
    fn vjp(&self, x: &Image, sigma: f64, at: Option<Placement>, v: &Image) -> Result<Image>;

    fn score(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image> {
        let d = self.denoise(x, sigma, at)?;
        tweedie_score(&d, x, sigma)
    }

    /// Evaluates the denoiser once and keeps what is needed for later VJPs.
    fn linearize<'a>(
        &'a self,
        x: &Image,
        sigma: f64,
        at: Option<Placement>,
    ) -> Result<Box<dyn Linearization + 'a>> {
        let output = self.denoise(x, sigma, at)?;
        Ok(Box::new(Recompute {
            model: self,
            x: x.clone(),
            sigma,
            at,
            output,
        }))
    }
}

struct Recompute<'a, M: ?Sized> {
    model: &'a M,
    x: Image,
    sigma: f64,
    at: Option<Placement>,
    output: Image,
}

impl<M: Denoiser + ?Sized> Linearization for Recompute<'_, M> {
    fn output(&self) -> &Image {
        &self.output
    }

    fn vjp(&self, v: &Image) -> Result<Image> {
        self.model.vjp(&self.x, self.sigma, self.at, v)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image> {
        (**self).denoise(x, sigma, at)
    }

    fn vjp(&self, x: &Image, sigma: f64, at: Option<Placement>, v: &Image) -> Result<Image> {
        (**self).vjp(x, sigma, at, v)
    }

    fn linearize<'a>(
        &'a self,
        x: &Image,
        sigma: f64,
        at: Option<Placement>,
    ) -> Result<Box<dyn Linearization + 'a>> {
        (**self).linearize(x, sigma, at)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise level must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

/// `(D - x) / sigma^2`
pub fn tweedie_score(denoised: &Image, x: &Image, sigma: f64) -> Result<Image> {
    check_sigma(sigma)?;
    let inv = 1.0 / (sigma * sigma);
    denoised.zip_map(x, |d, v| (d - v) * inv)
}

/// The border region is identically zero in the data, so its denoised value
/// is zero for every input.
pub fn border_denoise(x_border: &[f64]) -> Vec<f64> {
    vec![0.0; x_border.len()]
}

/// Tweedie score of the always-zero border: `-x_B / sigma^2`.
pub fn border_score(x_border: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let inv = 1.0 / (sigma * sigma);
    Ok(x_border.iter().map(|v| -v * inv).collect())
}

/// Noise level seen by a variance-exploding denoiser when a
/// variance-preserving state `sqrt(a) x0 + sqrt(1-a) eps` is divided by `sqrt(a)`.
pub fn vp_to_ve_sigma(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(((1.0 - alpha) / alpha).sqrt())
}

/// `s = -eps / sigma`
pub fn eps_to_score(eps: &Image, sigma: f64) -> Result<Image> {
    check_sigma(sigma)?;
    Ok(eps.scale(-1.0 / sigma))
}

/// `eps = -sigma * s`
pub fn score_to_eps(score: &Image, sigma: f64) -> Result<Image> {
    check_sigma(sigma)?;
    Ok(score.scale(-sigma))
}

/// Independent per-pixel Gaussian prior.
///
/// A zero variance marks a pixel that is deterministically equal to its mean,
/// which is how the zero frame of a padded canvas is expressed.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    mean: Image,
    variance: Image,
}

impl GaussianPrior {
    pub fn new(mean: Image, variance: Image) -> Result<Self> {
        mean.ensure_same_shape(&variance)?;
        if variance.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior variances must be finite and non-negative".into(),
            ));
        }
        Ok(Self { mean, variance })
    }

    pub fn isotropic(shape: Shape, mean: f64, variance: f64) -> Result<Self> {
        Self::new(Image::filled(shape, mean), Image::filled(shape, variance))
    }

    pub fn mean(&self) -> &Image {
        &self.mean
    }

    pub fn variance(&self) -> &Image {
        &self.variance
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }

    /// Posterior mean `mu + v/(v + sigma^2) (x - mu)`, pixel by pixel.
    pub fn denoise_full(&self, x: &Image, sigma: f64) -> Result<Image> {
        x.ensure_same_shape(&self.mean)?;
        Ok(denoise_diag(x, &self.mean, &self.variance, sigma))
    }

    /// Analytic score of the prior convolved with `N(0, sigma^2 I)`.
    pub fn score_full(&self, x: &Image, sigma: f64) -> Result<Image> {
        x.ensure_same_shape(&self.mean)?;
        check_sigma(sigma)?;
        let s2 = sigma * sigma;
        let mut out = x.clone();
        for ((o, m), v) in out
            .data_mut()
            .iter_mut()
            .zip(self.mean.data())
            .zip(self.variance.data())
        {
            *o = -(*o - m) / (v + s2);
        }
        Ok(out)
    }

    /// Jacobian of the denoiser is `diag(v / (v + sigma^2))`.
    pub fn vjp_full(&self, v: &Image, sigma: f64) -> Result<Image> {
        v.ensure_same_shape(&self.mean)?;
        Ok(vjp_diag(v, &self.variance, sigma))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Image {
        let mut out = self.mean.clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.variance.data()) {
            let n: f64 = rng.sample(StandardNormal);
            *o += v.sqrt() * n;
        }
        out
    }

    fn region(&self, x: &Image, at: Option<Placement>) -> Result<(Image, Image)> {
        if x.shape() == self.mean.shape() {
            return Ok((self.mean.clone(), self.variance.clone()));
        }
        let at = at.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "input {} differs from prior {} and carries no placement",
                x.shape(),
                self.mean.shape()
            ))
        })?;
        if at.canvas_side != self.mean.height() || x.channels() != self.mean.channels() {
            return Err(Error::shape(self.mean.shape(), format!("canvas side {}", at.canvas_side)));
        }
        Ok((
            self.mean.crop(at.row, at.col, x.height(), x.width())?,
            self.variance.crop(at.row, at.col, x.height(), x.width())?,
        ))
    }
}

fn denoise_diag(x: &Image, mean: &Image, variance: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return x.clone();
    }
    let s2 = sigma * sigma;
    let mut out = x.clone();
    for ((o, m), v) in out
        .data_mut()
        .iter_mut()
        .zip(mean.data())
        .zip(variance.data())
    {
        *o = m + v / (v + s2) * (*o - m);
    }
    out
}

fn vjp_diag(v: &Image, variance: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return v.clone();
    }
    let s2 = sigma * sigma;
    let mut out = v.clone();
    for (o, var) in out.data_mut().iter_mut().zip(variance.data()) {
        *o *= var / (var + s2);
    }
    out
}

impl Denoiser for GaussianPrior {
    fn denoise(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image> {
        if sigma < 0.0 {
            return Err(Error::InvalidParameter(format!("negative noise level {sigma}")));
        }
        let (mean, var) = self.region(x, at)?;
        Ok(denoise_diag(x, &mean, &var, sigma))
    }

    fn vjp(&self, x: &Image, sigma: f64, at: Option<Placement>, v: &Image) -> Result<Image> {
        x.ensure_same_shape(v)?;
        let (_, var) = self.region(x, at)?;
        Ok(vjp_diag(v, &var, sigma))
    }
}

/// One component of a diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Gaussian mixture with diagonal covariances over a fixed-length vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<MixtureComponent>,
}

pub const MAX_MIXTURE_COMPONENTS: usize = 8;

struct MixtureTerms {
    resp: Vec<f64>,
    /// per component: `v_k / (v_k + sigma^2)`
    gain: Vec<Vec<f64>>,
    /// per component: `-(x - mu_k) / (v_k + sigma^2)`
    grad: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() || components.len() > MAX_MIXTURE_COMPONENTS {
            return Err(Error::InvalidParameter(format!(
                "mixture needs 1..={MAX_MIXTURE_COMPONENTS} components, got {}",
                components.len()
            )));
        }
        let dim = components[0].mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::shape(dim, c.mean.len()));
            }
            if !(c.weight > 0.0) || c.variance.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidParameter(
                    "mixture weights and variances must be positive".into(),
                ));
            }
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self { dim, components })
    }

    /// Random mixture for tests and synthetic priors: means in `[lo, hi]`,
    /// variances in `[vmin, vmax]`.
    pub fn random(
        dim: usize,
        components: usize,
        (lo, hi): (f64, f64),
        (vmin, vmax): (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let raw: Vec<f64> = (0..components).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let comps = raw
            .into_iter()
            .map(|w| MixtureComponent {
                weight: w / total,
                mean: (0..dim).map(|_| rng.gen_range(lo..=hi)).collect(),
                variance: (0..dim).map(|_| rng.gen_range(vmin..=vmax)).collect(),
            })
            .collect();
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    fn terms(&self, x: &[f64], sigma: f64) -> Result<MixtureTerms> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        let s2 = sigma * sigma;
        let mut logw = Vec::with_capacity(self.components.len());
        let mut gain = Vec::with_capacity(self.components.len());
        let mut grad = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let mut lp = c.weight.ln();
            let mut g = Vec::with_capacity(self.dim);
            let mut a = Vec::with_capacity(self.dim);
            for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.variance) {
                let t = v + s2;
                let d = xi - m;
                lp -= 0.5 * (d * d / t + (2.0 * std::f64::consts::PI * t).ln());
                g.push(-d / t);
                a.push(v / t);
            }
            logw.push(lp);
            gain.push(a);
            grad.push(g);
        }
        let lse = log_sum_exp(&logw);
        let resp = logw.iter().map(|l| (l - lse).exp()).collect();
        Ok(MixtureTerms { resp, gain, grad })
    }

    /// `log p_sigma(x)` of the mixture convolved with `N(0, sigma^2 I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        let s2 = sigma * sigma;
        let logw: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.variance) {
                    let t = v + s2;
                    lp -= 0.5 * ((xi - m).powi(2) / t + (2.0 * std::f64::consts::PI * t).ln());
                }
                lp
            })
            .collect();
        Ok(log_sum_exp(&logw))
    }

    /// Responsibility-weighted component scores.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let t = self.terms(x, sigma)?;
        let mut out = vec![0.0; self.dim];
        for (r, g) in t.resp.iter().zip(&t.grad) {
            for (o, gi) in out.iter_mut().zip(g) {
                *o += r * gi;
            }
        }
        Ok(out)
    }

    /// Responsibility-weighted component posterior means.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let t = self.terms(x, sigma)?;
        Ok(self.mix_means(x, &t))
    }

    fn mix_means(&self, x: &[f64], t: &MixtureTerms) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for ((c, r), a) in self.components.iter().zip(&t.resp).zip(&t.gain) {
            for i in 0..self.dim {
                out[i] += r * (c.mean[i] + a[i] * (x[i] - c.mean[i]));
            }
        }
        out
    }

    /// `v^T dD/dx` for the mixture posterior mean.
    pub fn vjp(&self, x: &[f64], sigma: f64, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::shape(self.dim, v.len()));
        }
        let t = self.terms(x, sigma)?;
        let d = self.mix_means(x, &t);
        let mut gbar = vec![0.0; self.dim];
        for (r, g) in t.resp.iter().zip(&t.grad) {
            for (o, gi) in gbar.iter_mut().zip(g) {
                *o += r * gi;
            }
        }
        let mut out = vec![0.0; self.dim];
        for (((c, r), a), g) in self
            .components
            .iter()
            .zip(&t.resp)
            .zip(&t.gain)
            .zip(&t.grad)
        {
            // (m_k - D) . v, where m_k is the component posterior mean
            let proj: f64 = (0..self.dim)
                .map(|i| (c.mean[i] + a[i] * (x[i] - c.mean[i]) - d[i]) * v[i])
                .sum();
            for i in 0..self.dim {
                out[i] += r * (a[i] * v[i] + (g[i] - gbar[i]) * proj);
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen
            .mean
            .iter()
            .zip(&chosen.variance)
            .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A canvas distribution that factorizes exactly over one partition: an
/// independent mixture per patch and a border that is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProductPrior {
    spec: PartitionSpec,
    channels: usize,
    factors: Vec<GaussianMixture>,
}

impl PatchProductPrior {
    pub fn new(spec: PartitionSpec, channels: usize, factors: Vec<GaussianMixture>) -> Result<Self> {
        let dim = spec.patch() * spec.patch() * channels;
        if factors.len() != spec.patch_count() {
            return Err(Error::shape(spec.patch_count(), factors.len()));
        }
        if let Some(f) = factors.iter().find(|f| f.dim() != dim) {
            return Err(Error::shape(dim, f.dim()));
        }
        Ok(Self {
            spec,
            channels,
            factors,
        })
    }

    pub fn random(
        spec: PartitionSpec,
        channels: usize,
        components: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dim = spec.patch() * spec.patch() * channels;
        let factors = (0..spec.patch_count())
            .map(|_| GaussianMixture::random(dim, components, (0.0, 1.0), (0.01, 0.2), rng))
            .collect::<Result<_>>()?;
        Self::new(spec, channels, factors)
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn canvas_shape(&self) -> Shape {
        self.spec.layout().canvas_shape(self.channels)
    }

    fn factor_at(&self, row: usize, col: usize) -> Option<&GaussianMixture> {
        self.spec
            .origins()
            .iter()
            .position(|&o| o == (row, col))
            .map(|k| &self.factors[k])
    }

    /// Whole-canvas score: mixture scores on each patch, `-x/sigma^2` on the border.
    pub fn score(&self, canvas: &Image, sigma: f64) -> Result<Image> {
        canvas.ensure_shape(self.canvas_shape())?;
        check_sigma(sigma)?;
        let inv = 1.0 / (sigma * sigma);
        let mut out = canvas.map(|v| -v * inv);
        let p = self.spec.patch();
        for (factor, (row, col)) in self.factors.iter().zip(self.spec.origins()) {
            let patch = canvas.crop(row, col, p, p)?;
            let s = factor.score(patch.data(), sigma)?;
            out.paste(&Image::new(patch.shape(), s)?, row, col)?;
        }
        Ok(out)
    }

    /// Log of the noisy canvas density.
    pub fn log_density(&self, canvas: &Image, sigma: f64) -> Result<f64> {
        canvas.ensure_shape(self.canvas_shape())?;
        check_sigma(sigma)?;
        let p = self.spec.patch();
        let mut total = 0.0;
        for (factor, (row, col)) in self.factors.iter().zip(self.spec.origins()) {
            total += factor.log_density(canvas.crop(row, col, p, p)?.data(), sigma)?;
        }
        let s2 = sigma * sigma;
        let side = self.spec.layout().canvas_side();
        for c in 0..self.channels {
            for r in 0..side {
                for q in 0..side {
                    if self.spec.is_border(r, q) {
                        let v = canvas.at(c, r, q);
                        total -= 0.5 * (v * v / s2 + (2.0 * std::f64::consts::PI * s2).ln());
                    }
                }
            }
        }
        Ok(total)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Image {
        let mut canvas = Image::zeros(self.canvas_shape());
        let p = self.spec.patch();
        for (factor, (row, col)) in self.factors.iter().zip(self.spec.origins()) {
            let values = factor.sample(rng);
            let patch = Image::new(Shape::new(p, p, self.channels), values)
                .expect("factor dimension matches patch");
            canvas.paste(&patch, row, col).expect("patch inside canvas");
        }
        canvas
    }

    fn denoise_canvas(&self, canvas: &Image, sigma: f64) -> Result<Image> {
        let mut out = Image::zeros(canvas.shape());
        let p = self.spec.patch();
        for (factor, (row, col)) in self.factors.iter().zip(self.spec.origins()) {
            let patch = canvas.crop(row, col, p, p)?;
            let d = factor.denoise(patch.data(), sigma)?;
            out.paste(&Image::new(patch.shape(), d)?, row, col)?;
        }
        Ok(out)
    }

    fn vjp_canvas(&self, canvas: &Image, sigma: f64, v: &Image) -> Result<Image> {
        let mut out = Image::zeros(canvas.shape());
        let p = self.spec.patch();
        for (factor, (row, col)) in self.factors.iter().zip(self.spec.origins()) {
            let patch = canvas.crop(row, col, p, p)?;
            let vp = v.crop(row, col, p, p)?;
            let g = factor.vjp(patch.data(), sigma, vp.data())?;
            out.paste(&Image::new(patch.shape(), g)?, row, col)?;
        }
        Ok(out)
    }

    fn locate(&self, x: &Image, at: Option<Placement>) -> Result<Option<&GaussianMixture>> {
        if x.shape() == self.canvas_shape() {
            return Ok(None);
        }
        let at = at.ok_or_else(|| Error::InvalidParameter("patch input needs a placement".into()))?;
        let p = self.spec.patch();
        if x.shape() != Shape::new(p, p, self.channels) {
            return Err(Error::shape(Shape::new(p, p, self.channels), x.shape()));
        }
        self.factor_at(at.row, at.col).map(Some).ok_or_else(|| {
            Error::Geometry(format!(
                "({}, {}) is not a patch origin of the prior's partition",
                at.row, at.col
            ))
        })
    }
}

impl Denoiser for PatchProductPrior {
    fn denoise(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image> {
        check_sigma(sigma)?;
        match self.locate(x, at)? {
            None => self.denoise_canvas(x, sigma),
            Some(f) => Image::new(x.shape(), f.denoise(x.data(), sigma)?),
        }
    }

    fn vjp(&self, x: &Image, sigma: f64, at: Option<Placement>, v: &Image) -> Result<Image> {
        check_sigma(sigma)?;
        x.ensure_same_shape(v)?;
        match self.locate(x, at)? {
            None => self.vjp_canvas(x, sigma, v),
            Some(f) => Image::new(x.shape(), f.vjp(x.data(), sigma, v.data())?),
        }
    }
}
