//! Denoising score matching on random patches of zero-padded canvases.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::checkpoint::Checkpoint;
use super::net::{NetArch, PatchDenoiserNet, SIGMA_DATA};
use crate::error::{Error, Result};
use crate::grid::{CanvasLayout, PositionalGrid};
use crate::image::{Image, Shape};

/// One training example: a clean patch, where it came from, and the noise
/// drawn for it.
#[derive(Clone, Debug)]
pub struct DsmSample {
    pub clean: Image,
    /// `[x, y]` positional planes; noise is never added to these.
    pub positions: Image,
    pub sigma: f64,
    pub noise: Image,
}

#[derive(Clone, Debug)]
pub struct DsmLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Per-sample weight of the squared error as a function of the noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeighting {
    Uniform,
    /// `1 / c_out(sigma)^2`, which gives the raw network a unit-scale target
    /// at every noise level. Without it the low-noise levels contribute
    /// almost nothing to the loss and stay untrained.
    Edm,
}

impl LossWeighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::Edm => {
                let sd2 = SIGMA_DATA * SIGMA_DATA;
                (sigma * sigma + sd2) / (sigma * sigma * sd2)
            }
        }
    }
}

/// Mean over the batch of the per-patch mean squared error
/// `|D(x + n, sigma) - x|^2`, with its parameter gradient.
pub fn dsm_loss(net: &PatchDenoiserNet, batch: &[DsmSample]) -> Result<DsmLoss> {
    dsm_loss_weighted(net, batch, LossWeighting::Uniform)
}

/// [`dsm_loss`] with each sample's error scaled by `weighting.weight(sigma)`.
pub fn dsm_loss_weighted(net: &PatchDenoiserNet, batch: &[DsmSample], weighting: LossWeighting) -> Result<DsmLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    for sample in batch {
        sample.clean.ensure_same_shape(&sample.noise)?;
        let noisy = sample.clean.add(&sample.noise)?;
        let pass = net.denoise_pass(&noisy, sample.sigma, Some(&sample.positions))?;
        let resid = pass.output.sub(&sample.clean)?;
        let scale = weighting.weight(sample.sigma) * inv_batch / resid.len() as f64;
        loss += scale * resid.data().iter().map(|r| r * r).sum::<f64>();
        net.pass_backward(&pass, &resid.scale(2.0 * scale), Some(&mut grad))?;
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite DSM loss {loss}")));
    }
    Ok(DsmLoss { loss, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: NetArch,
    /// Main patch size `P`; fixes the canvas padding.
    pub patch: usize,
    /// Training patch sides with their selection probabilities.
    pub patch_sizes: Vec<(usize, f64)>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// EMA half-life measured in patches seen.
    pub ema_half_life: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Write a log row every this many steps (0 disables logging).
    pub log_every: usize,
    pub weighting: LossWeighting,
}

impl TrainConfig {
    /// Desk-scale defaults for `P = 16`.
    pub fn desk_default(image_channels: usize) -> Self {
        Self {
            arch: NetArch::desk_default(image_channels),
            patch: 16,
            patch_sizes: vec![(12, 0.3), (16, 0.7)],
            sigma_min: 0.002,
            sigma_max: 40.0,
            batch_size: 8,
            learning_rate: 2e-4,
            ema_half_life: 4_000.0,
            iterations: 5_000,
            seed: 0,
            log_every: 50,
            weighting: LossWeighting::Edm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::InvalidParameter("no training patch sizes".into()));
        }
        let total: f64 = self.patch_sizes.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.patch_sizes.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "patch size probabilities sum to {total}, not 1"
            )));
        }
        let rf = self.arch.receptive_field();
        if let Some((s, _)) = self.patch_sizes.iter().find(|(s, _)| *s < rf) {
            return Err(Error::InvalidParameter(format!(
                "patch size {s} is below the receptive field {rf}"
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.ema_half_life > 0.0) {
            return Err(Error::InvalidParameter(
                "batch size, learning rate and EMA half-life must be positive".into(),
            ));
        }
        Ok(())
    }

    fn draw_patch_size(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(size, p) in &self.patch_sizes {
            acc += p;
            if u < acc {
                return size;
            }
        }
        self.patch_sizes[self.patch_sizes.len() - 1].0
    }

    fn draw_sigma(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        (lo + (hi - lo) * rng.gen::<f64>()).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    pub patch: Image,
    pub positions: Image,
    pub size: usize,
    pub row: usize,
    pub col: usize,
}

/// Draws a patch size from the configured distribution and a uniformly
/// random location fully inside the padded canvas.
pub fn sample_training_patch(
    canvas: &Image,
    grid: &PositionalGrid,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingPatch> {
    let size = config.draw_patch_size(rng);
    sample_patch_of_size(canvas, grid, size, rng)
}

fn sample_patch_of_size(
    canvas: &Image,
    grid: &PositionalGrid,
    size: usize,
    rng: &mut impl Rng,
) -> Result<TrainingPatch> {
    let side = canvas.height();
    if canvas.width() != side || grid.side() != side {
        return Err(Error::shape(format!("{0}x{0} canvas", grid.side()), canvas.shape()));
    }
    if size > side {
        return Err(Error::Geometry(format!(
            "patch side {size} exceeds canvas side {side}"
        )));
    }
    let row = rng.gen_range(0..=side - size);
    let col = rng.gen_range(0..=side - size);
    Ok(TrainingPatch {
        patch: canvas.crop(row, col, size, size)?,
        positions: grid.patch(row, col, size)?,
        size,
        row,
        col,
    })
}

/// Builds one batch of noisy training samples.
pub fn sample_batch(
    canvases: &[Image],
    grid: &PositionalGrid,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DsmSample>> {
    if canvases.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let size = config.draw_patch_size(rng);
    (0..config.batch_size)
        .map(|_| {
            let canvas = &canvases[rng.gen_range(0..canvases.len())];
            let tp = sample_patch_of_size(canvas, grid, size, rng)?;
            let sigma = config.draw_sigma(rng);
            let noise = Image::from_fn(tp.patch.shape(), |_, _, _| {
                sigma * rng.sample::<f64, _>(StandardNormal)
            });
            Ok(DsmSample {
                clean: tp.patch,
                positions: tp.positions,
                sigma,
                noise,
            })
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
        }
    }
}

/// Training log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub sigma_mean: f64,
    pub wall_ms: u128,
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,sigma_mean,wall_ms";

/// Trains a fresh network on zero-padded canvases (side `N + 2M` for the
/// configured patch size). Rows of the training log go to `log` as CSV.
pub fn train(
    canvases: &[Image],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    config.validate()?;
    let first = canvases
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty training set".into()))?;
    let side = first.height();
    if let Some(c) = canvases.iter().find(|c| c.shape() != first.shape()) {
        return Err(Error::shape(first.shape(), c.shape()));
    }
    if first.channels() != config.arch.image_channels {
        return Err(Error::shape(config.arch.image_channels, first.channels()));
    }
    let n = side - 2 * infer_pad(side, config.patch)?;
    let grid = PositionalGrid::new(side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = PatchDenoiserNet::init(config.arch, &mut rng)?;
    let mut ema = net.params().to_vec();
    let mut adam = Adam::new(config.learning_rate, ema.len());
    let decay = 0.5f64.powf(config.batch_size as f64 / config.ema_half_life);
    let start = Instant::now();
    let mut initial = None;

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
    }
    for step in 0..config.iterations {
        let batch = sample_batch(canvases, &grid, config, &mut rng)?;
        let DsmLoss { loss, grad } = dsm_loss_weighted(&net, &batch, config.weighting)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        let reference = *initial.get_or_insert(loss);
        if loss > 1e3 * reference {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss {loss:.4e} vs initial {reference:.4e}"
            )));
        }
        adam.step(net.params_mut(), &grad);
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters after step {step}")));
        }
        for (e, p) in ema.iter_mut().zip(net.params()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        if let Some(w) = log.as_deref_mut() {
            if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.iterations) {
                let sigma_mean = batch.iter().map(|s| s.sigma).sum::<f64>() / batch.len() as f64;
                let row = LogRow {
                    step,
                    loss,
                    sigma_mean,
                    wall_ms: start.elapsed().as_millis(),
                };
                writeln!(w, "{},{:.8e},{:.6e},{}", row.step, row.loss, row.sigma_mean, row.wall_ms)?;
            }
        }
    }
    Ok(Checkpoint::new(
        config.arch,
        n,
        config.patch,
        net.params(),
        &ema,
        config.seed,
        config.iterations as u64,
    ))
}

/// Recovers the padding from a canvas side and patch size.
fn infer_pad(side: usize, patch: usize) -> Result<usize> {
    // side = N + 2M with M = (floor(N/P) + 1) P - N, so side = 2(k+1)P - N
    for k in 0..=side / patch.max(1) {
        let covered = 2 * (k + 1) * patch;
        if covered < side {
            continue;
        }
        let n = covered - side;
        if n > patch && n / patch == k {
            return Ok(CanvasLayout::new(n, patch)?.pad());
        }
    }
    Err(Error::Geometry(format!(
        "canvas side {side} is not a padded canvas for patch size {patch}"
    )))
}

/// Loss of a fixed denoiser over a fixed set of samples, e.g. for validation.
pub fn evaluate_loss(
    denoise: impl Fn(&Image, f64, &Image) -> Result<Image>,
    samples: &[DsmSample],
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let noisy = s.clean.add(&s.noise)?;
        let out = denoise(&noisy, s.sigma, &s.positions)?;
        let r = out.sub(&s.clean)?;
        total += r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Fixed validation samples at one noise level.
pub fn validation_samples(
    canvases: &[Image],
    patch: usize,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<DsmSample>> {
    let first = canvases
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty validation set".into()))?;
    let grid = PositionalGrid::new(first.height())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let canvas = &canvases[rng.gen_range(0..canvases.len())];
            let tp = sample_patch_of_size(canvas, &grid, patch, &mut rng)?;
            let noise = Image::from_fn(Shape::new(patch, patch, canvas.channels()), |_, _, _| {
                sigma * rng.sample::<f64, _>(StandardNormal)
            });
            Ok(DsmSample {
                clean: tp.patch,
                positions: tp.positions,
                sigma,
                noise,
            })
        })
        .collect()
}
