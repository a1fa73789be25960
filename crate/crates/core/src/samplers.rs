//! Noise schedules and the reconstruction loops.
//!
//! Every sampler runs on the full padded canvas, reaches the prior only
//! through [`Prior`], and returns the central crop. The operator acts on that
//! crop, so the data-consistency terms never touch the padding frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::assemble::{Estimate, Prior};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::metrics::psnr;
use crate::operators::{ddnm_project, LinearOperator, Measurement};

/// Geometric noise levels `sigma_1 < ... < sigma_T`, traversed from the top.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

pub fn make_schedule(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "schedule needs 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if steps < 2 {
        return Err(Error::InvalidParameter(format!("schedule needs T >= 2, got {steps}")));
    }
    let ratio = sigma_max / sigma_min;
    let mut sigmas: Vec<f64> = (0..steps)
        .map(|t| sigma_min * ratio.powf(t as f64 / (steps - 1) as f64))
        .collect();
    sigmas[0] = sigma_min;
    sigmas[steps - 1] = sigma_max;
    Ok(NoiseSchedule { sigmas })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `sigma_t` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn max(&self) -> f64 {
        *self.sigmas.last().expect("schedules are never empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Padis,
    Langevin,
    PredictorCorrector,
    Ddnm,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 4] = [
        SamplerKind::Padis,
        SamplerKind::Langevin,
        SamplerKind::PredictorCorrector,
        SamplerKind::Ddnm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Padis => "padis",
            SamplerKind::Langevin => "langevin",
            SamplerKind::PredictorCorrector => "pc",
            SamplerKind::Ddnm => "ddnm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sampler {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Langevin step scale; the step at level `sigma` is `epsilon * sigma^2`.
    pub epsilon: f64,
    /// Data-consistency scale, divided by the current residual norm.
    pub zeta: f64,
    /// Corrector signal-to-noise ratio for predictor-corrector sampling.
    pub r: f64,
    pub seed: u64,
    /// Force the padding frame to zero after every update.
    pub clamp_border: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, seed: u64) -> Self {
        Self {
            steps,
            sigma_min,
            sigma_max,
            epsilon: 1.0,
            zeta: 0.3,
            r: 0.16,
            seed,
            clamp_border: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.zeta >= 0.0) || !(self.r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need zeta >= 0 and r > 0, got {} and {}",
                self.zeta, self.r
            )));
        }
        make_schedule(self.sigma_min, self.sigma_max, self.steps).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.sigma_min, self.sigma_max, self.steps)
    }
}

/// A measurement to explain, optionally with the ground truth for tracing.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub op: &'a dyn LinearOperator,
    pub y: &'a Measurement,
    pub truth: Option<&'a Image>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub sigma: f64,
    /// `|y - A(D)|` for the denoised estimate of this iteration.
    pub residual: f64,
    /// PSNR of the denoised estimate against the truth, when known.
    pub psnr: Option<f64>,
}

pub const TRACE_HEADER: &str = "t,sigma,residual,psnr";

impl TraceRow {
    pub fn csv(&self) -> String {
        let psnr = self
            .psnr
            .map(|p| format!("{:.6}", crate::metrics::psnr_for_csv(p)))
            .unwrap_or_default();
        format!("{},{:.8e},{:.8e},{}", self.t, self.sigma, self.residual, psnr)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Central crop of the final canvas.
    pub image: Image,
    pub canvas: Image,
    pub trace: Vec<TraceRow>,
    /// Number of whole-canvas denoiser sweeps.
    pub nfe: usize,
}

struct Run<'p, 'a> {
    prior: &'p Prior<'a>,
    cfg: &'p SamplerConfig,
    rng: ChaCha8Rng,
    trace: Vec<TraceRow>,
    nfe: usize,
}

impl<'p, 'a> Run<'p, 'a> {
    fn new(prior: &'p Prior<'a>, cfg: &'p SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prior,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            trace: Vec::with_capacity(cfg.steps),
            nfe: 0,
        })
    }

    fn canvas_shape(&self, channels: usize) -> Shape {
        Shape::square(self.prior.canvas_side(), channels)
    }

    fn gaussian(&mut self, shape: Shape, scale: f64) -> Image {
        let rng = &mut self.rng;
        Image::from_fn(shape, |_, _, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    }

    fn estimate(&mut self, x: &Image, sigma: f64, linearize: bool) -> Result<Estimate<'a>> {
        self.nfe += 1;
        self.prior.estimate(x, sigma, &mut self.rng, linearize)
    }

    /// `x + (alpha/2) s + sqrt(alpha) z` with `alpha = epsilon sigma^2`.
    fn langevin_move(&mut self, x: &mut Image, score: &Image, sigma: f64) -> Result<()> {
        let alpha = self.cfg.epsilon * sigma * sigma;
        x.axpy(alpha / 2.0, score)?;
        let z = self.gaussian(x.shape(), alpha.sqrt());
        x.axpy(1.0, &z)
    }

    fn finish_step(&mut self, x: Image, t: usize, sigma: f64) -> Result<Image> {
        if !x.is_finite() {
            return Err(Error::Numerical(format!(
                "state became non-finite at iteration t={t} (sigma={sigma:.4e})"
            )));
        }
        if self.cfg.clamp_border {
            self.prior.assembler().clear_frame(&x)
        } else {
            Ok(x)
        }
    }

    fn record(&mut self, t: usize, sigma: f64, denoised: &Image, problem: Option<&Problem>) -> Result<()> {
        let inner = self.prior.assembler().crop_inner(denoised)?;
        let (residual, psnr) = match problem {
            Some(p) => (
                p.y.sub(&p.op.apply(&inner)?)?.norm(),
                p.truth.map(|g| psnr(&inner, g, 1.0)).transpose()?,
            ),
            None => (0.0, None),
        };
        self.trace.push(TraceRow {
            t,
            sigma,
            residual,
            psnr,
        });
        Ok(())
    }

    fn done(self, canvas: Image) -> Result<Reconstruction> {
        Ok(Reconstruction {
            image: self.prior.assembler().crop_inner(&canvas)?,
            canvas,
            trace: self.trace,
            nfe: self.nfe,
        })
    }
}

fn check_problem(prior: &Prior, problem: &Problem) -> Result<usize> {
    let shape = problem.op.input_shape();
    if shape.height != prior.inner_side() || shape.width != prior.inner_side() {
        return Err(Error::shape(
            format!("operator on {0}x{0} images", prior.inner_side()),
            shape,
        ));
    }
    problem.y.ensure_shape(problem.op.output_shape())?;
    if !problem.y.is_finite() {
        return Err(Error::Numerical("measurement contains non-finite values".into()));
    }
    Ok(shape.channels)
}

/// `A^T (y - A(crop x))` embedded in the canvas, and `|y - A(crop x)|`.
fn data_gradient(prior: &Prior, problem: &Problem, x: &Image) -> Result<(Image, f64)> {
    let asm = prior.assembler();
    let r = problem.y.sub(&problem.op.apply(&asm.crop_inner(x)?)?)?;
    Ok((asm.embed_inner(&problem.op.adjoint(&r)?)?, r.norm()))
}

/// Patch diffusion inverse solver: a DPS gradient step through the assembled
/// denoiser followed by an annealed Langevin step, one random partition per
/// iteration.
pub fn padis_reconstruct(prior: &Prior, problem: &Problem, cfg: &SamplerConfig) -> Result<Reconstruction> {
    let channels = check_problem(prior, problem)?;
    padis_loop(prior, Some(problem), channels, cfg)
}

/// Unconditional sampling: the PaDIS loop with no data term.
pub fn generate(prior: &Prior, channels: usize, cfg: &SamplerConfig) -> Result<Reconstruction> {
    padis_loop(prior, None, channels, cfg)
}

fn padis_loop(prior: &Prior, problem: Option<&Problem>, channels: usize, cfg: &SamplerConfig) -> Result<Reconstruction> {
    let schedule = cfg.schedule()?;
    let mut run = Run::new(prior, cfg)?;
    let mut x = run.gaussian(run.canvas_shape(channels), schedule.max());
    let data_term = problem.filter(|_| cfg.zeta > 0.0);
    for t in (1..=schedule.len()).rev() {
        let sigma = schedule.sigma(t);
        let est = run.estimate(&x, sigma, data_term.is_some())?;
        let score = est.score()?;
        if let Some(p) = data_term {
            let asm = prior.assembler();
            let r = p.y.sub(&p.op.apply(&asm.crop_inner(&est.denoised)?)?)?;
            let step = cfg.zeta / r.norm().max(1e-8);
            let back = prior.vjp(&est, &asm.embed_inner(&p.op.adjoint(&r)?)?)?;
            // -grad |y - A(D)|^2 = 2 J^T A^T (y - A(D))
            x.axpy(2.0 * step, &back)?;
        }
        run.record(t, sigma, &est.denoised, problem)?;
        run.langevin_move(&mut x, &score, sigma)?;
        x = run.finish_step(x, t, sigma)?;
    }
    run.done(x)
}

/// Annealed Langevin dynamics with a normalized data step on `x` itself.
pub fn langevin_reconstruct(prior: &Prior, problem: &Problem, cfg: &SamplerConfig) -> Result<Reconstruction> {
    let channels = check_problem(prior, problem)?;
    let schedule = cfg.schedule()?;
    let mut run = Run::new(prior, cfg)?;
    let mut x = run.gaussian(run.canvas_shape(channels), schedule.max());
    for t in (1..=schedule.len()).rev() {
        let sigma = schedule.sigma(t);
        let est = run.estimate(&x, sigma, false)?;
        let score = est.score()?;
        let (g, res) = data_gradient(prior, problem, &x)?;
        x.axpy(cfg.zeta / res.max(1e-8), &g)?;
        run.record(t, sigma, &est.denoised, Some(problem))?;
        run.langevin_move(&mut x, &score, sigma)?;
        x = run.finish_step(x, t, sigma)?;
    }
    run.done(x)
}

/// Reverse-diffusion predictor followed by one Langevin corrector step,
/// with a data step after each. Runs over `i = T-1, ..., 1` so that
/// `sigma_{i+1}` always exists.
pub fn pc_reconstruct(prior: &Prior, problem: &Problem, cfg: &SamplerConfig) -> Result<Reconstruction> {
    let channels = check_problem(prior, problem)?;
    let schedule = cfg.schedule()?;
    let mut run = Run::new(prior, cfg)?;
    let mut x = run.gaussian(run.canvas_shape(channels), schedule.max());
    let data_step = |x: &mut Image| -> Result<()> {
        let (g, res) = data_gradient(prior, problem, x)?;
        x.axpy(cfg.zeta / res.max(1e-8), &g)
    };
    for i in (1..schedule.len()).rev() {
        let (hi, lo) = (schedule.sigma(i + 1), schedule.sigma(i));
        let gap = hi * hi - lo * lo;

        let s_hi = run.estimate(&x, hi, false)?.score()?;
        x.axpy(gap, &s_hi)?;
        data_step(&mut x)?;
        let z = run.gaussian(x.shape(), gap.sqrt());
        x.axpy(1.0, &z)?;

        let z = run.gaussian(x.shape(), 1.0);
        let est = run.estimate(&x, lo, false)?;
        let s = est.score()?;
        let s_norm = s.norm();
        if s_norm > 0.0 {
            let eps = 2.0 * cfg.r * z.norm() / s_norm;
            x.axpy(eps, &s)?;
            x.axpy((2.0 * eps).sqrt(), &z)?;
        }
        data_step(&mut x)?;
        run.record(i, lo, &est.denoised, Some(problem))?;
        x = run.finish_step(x, i, lo)?;
    }
    run.done(x)
}

/// Range-null-space sampler: the denoised estimate's range component is
/// replaced by the pseudo-inverse of the measurement before the score is
/// formed.
pub fn ddnm_reconstruct(prior: &Prior, problem: &Problem, cfg: &SamplerConfig) -> Result<Reconstruction> {
    let channels = check_problem(prior, problem)?;
    if !problem.op.has_pinv() {
        return Err(Error::Unsupported(format!(
            "the ddnm sampler needs a pseudo-inverse, which the {} operator lacks",
            problem.op.name()
        )));
    }
    let schedule = cfg.schedule()?;
    let mut run = Run::new(prior, cfg)?;
    let asm = prior.assembler();
    let mut x = run.gaussian(run.canvas_shape(channels), schedule.max());
    for t in (1..=schedule.len()).rev() {
        let sigma = schedule.sigma(t);
        let est = run.estimate(&x, sigma, false)?;
        let mut d = est.denoised;
        let inner = ddnm_project(&asm.crop_inner(&d)?, problem.y, problem.op)?;
        let m = (asm.canvas_side() - asm.inner_side()) / 2;
        d.paste(&inner, m, m)?;
        let score = d.sub(&x)?.scale(1.0 / (sigma * sigma));
        run.record(t, sigma, &d, Some(problem))?;
        run.langevin_move(&mut x, &score, sigma)?;
        x = run.finish_step(x, t, sigma)?;
    }
    run.done(x)
}

pub fn reconstruct(kind: SamplerKind, prior: &Prior, problem: &Problem, cfg: &SamplerConfig) -> Result<Reconstruction> {
    match kind {
        SamplerKind::Padis => padis_reconstruct(prior, problem, cfg),
        SamplerKind::Langevin => langevin_reconstruct(prior, problem, cfg),
        SamplerKind::PredictorCorrector => pc_reconstruct(prior, problem, cfg),
        SamplerKind::Ddnm => ddnm_reconstruct(prior, problem, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = make_schedule(0.002, 10.0, 1000).unwrap();
        assert_eq!(s.sigma(1), 0.002);
        assert_eq!(s.sigma(1000), 10.0);
        assert!(s.sigmas().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(make_schedule(0.01, 40.0, 2).unwrap().sigmas(), &[0.01, 40.0]);
        assert!(make_schedule(1.0, 1.0, 10).is_err());
        assert!(make_schedule(0.1, 1.0, 1).is_err());
        assert!(make_schedule(0.0, 1.0, 10).is_err());
    }

    #[test]
    fn schedule_is_geometric() {
        let s = make_schedule(0.01, 40.0, 50).unwrap();
        for t in 1..=50 {
            let want = 0.01 * 4000f64.powf((t - 1) as f64 / 49.0);
            assert!((s.sigma(t) / want - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in SamplerKind::ALL {
            assert_eq!(SamplerKind::parse(k.name()).unwrap(), k);
        }
        assert!(SamplerKind::parse("ddim").is_err());
    }
}
