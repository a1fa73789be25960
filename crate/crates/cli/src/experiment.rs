//! Experiment configuration and the runs behind each CLI verb.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use padis::assemble::{Assembler, AssemblyMode, Prior};
use padis::baselines::{admm_tv, fbp, naive_baseline, AdmmConfig, NaiveKind};
use padis::denoiser::{train, Activation, Checkpoint, LossWeighting, NetArch, PatchDenoiserNet, TrainConfig};
use padis::grid::CanvasLayout;
use padis::metrics::{psnr, psnr_for_csv, ssim};
use padis::operators::{
    add_noise, sinogram, BoxBlur, CgPinv, CtGeometry, Downsample, LinearOperator, Radon,
};
use padis::pnm::{self, Depth};
use padis::samplers::{generate, reconstruct, Problem, SamplerConfig, SamplerKind, TRACE_HEADER};
use padis::scoremodel::{Denoiser, GaussianPrior};
use padis::{Image, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RawConfig;
use crate::synth::{self, PhantomKind, PhantomSpec};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Ct { views: usize },
    Deblur { kernel: usize },
    Superres { factor: usize },
    Generate,
}

impl ProblemKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let num = |rest: &str| {
            rest.parse::<usize>()
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| CliError::Config(format!("unknown problem {s:?}")))
        };
        if s == "generate" {
            Ok(ProblemKind::Generate)
        } else if let Some(rest) = s.strip_prefix("ct") {
            Ok(ProblemKind::Ct { views: num(rest)? })
        } else if let Some(rest) = s.strip_prefix("deblur") {
            Ok(ProblemKind::Deblur { kernel: num(rest)? })
        } else if let Some(rest) = s.strip_prefix("sr") {
            Ok(ProblemKind::Superres { factor: num(rest)? })
        } else {
            Err(CliError::Config(format!(
                "unknown problem {s:?} (expected ct8, ct20, ct60, deblur9, deblur17, sr4 or generate)"
            )))
        }
    }

    pub fn name(self) -> String {
        match self {
            ProblemKind::Ct { views } => format!("ct{views}"),
            ProblemKind::Deblur { kernel } => format!("deblur{kernel}"),
            ProblemKind::Superres { factor } => format!("sr{factor}"),
            ProblemKind::Generate => "generate".into(),
        }
    }

    /// `(sigma_max, sigma_min)` of the sampling schedule.
    pub fn default_schedule(self) -> (f64, f64) {
        match self {
            ProblemKind::Ct { views } if views <= 8 => (10.0, 0.003),
            ProblemKind::Ct { .. } => (10.0, 0.002),
            ProblemKind::Deblur { .. } => (40.0, 0.005),
            ProblemKind::Superres { .. } => (40.0, 0.01),
            ProblemKind::Generate => (40.0, 0.002),
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            ProblemKind::Deblur { .. } | ProblemKind::Superres { .. } => 0.01,
            _ => 0.0,
        }
    }

    /// Data-consistency scale. The CT operator's norm is roughly `sqrt(views N)`,
    /// so its step is scaled down by about that factor.
    pub fn default_zeta(self) -> f64 {
        match self {
            ProblemKind::Ct { .. } => 0.02,
            ProblemKind::Deblur { .. } | ProblemKind::Superres { .. } => 1.0,
            ProblemKind::Generate => 0.0,
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            ProblemKind::Deblur { .. } => 0.002,
            ProblemKind::Superres { .. } => 0.006,
            _ => 0.001,
        }
    }
}

fn parse_assembly(name: &str, overlap: usize) -> Result<AssemblyMode, CliError> {
    Ok(match name {
        "stochastic" | "padis" => AssemblyMode::PadisStochastic,
        "full-average" => AssemblyMode::PadisFullAverage,
        "overlap-average" | "averaging" => AssemblyMode::OverlapAverage { overlap },
        "overlap-stitch" | "stitching" => AssemblyMode::OverlapStitch { overlap },
        "whole" => AssemblyMode::WholeCanvas,
        _ => {
            return Err(CliError::Config(format!(
                "unknown assembler {name:?} (stochastic, full-average, overlap-average, overlap-stitch, whole)"
            )))
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    PatchSize,
    PositionalEncoding,
    Sampler,
    DatasetSize,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "patch_size" => Ok(Self::PatchSize),
            "positional_encoding" => Ok(Self::PositionalEncoding),
            "sampler" => Ok(Self::Sampler),
            "dataset_size" => Ok(Self::DatasetSize),
            _ => Err(CliError::Config(format!(
                "unknown ablation axis {s:?} (patch_size, positional_encoding, sampler, dataset_size)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PatchSize => "patch_size",
            Self::PositionalEncoding => "positional_encoding",
            Self::Sampler => "sampler",
            Self::DatasetSize => "dataset_size",
        }
    }

    fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::PatchSize => &["8", "16", "32"],
            Self::PositionalEncoding => &["on", "off"],
            Self::Sampler => &["padis", "langevin", "pc", "ddnm"],
            Self::DatasetSize => &["50", "100", "200"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub images: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub depth: usize,
    pub positional: bool,
    pub ema_half_life: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub log_every: usize,
    pub patch_sizes: Vec<(usize, f64)>,
    pub weighting: LossWeighting,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    /// Inner image side `N`.
    pub size: usize,
    pub patch: usize,
    pub channels: usize,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sampler: SamplerKind,
    pub assembly: AssemblyMode,
    pub zeta: f64,
    pub epsilon: f64,
    pub r: f64,
    pub clamp_border: bool,
    /// Standard deviation of the measurement noise.
    pub noise: f64,
    pub lambda: f64,
    pub admm: AdmmConfig,
    pub baselines: bool,
    pub seed: u64,
    pub phantoms: PhantomSpec,
    pub data_seed: u64,
    pub test_seed: u64,
    pub test_images: usize,
    pub test_dir: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub train: TrainSettings,
    pub checkpoint: Option<PathBuf>,
    pub oracle: bool,
    pub out: Option<PathBuf>,
    pub generate_count: usize,
    pub synth_count: usize,
    pub ablate_axis: Option<AblationAxis>,
    pub ablate_values: Option<Vec<String>>,
    pub threads: Option<usize>,
}

const KNOWN_KEYS: &[&str] = &[
    "problem", "size", "patch", "channels", "steps", "sigma_min", "sigma_max", "sampler",
    "assembler", "overlap", "zeta", "epsilon", "r", "clamp_border", "noise", "lambda",
    "admm.rho", "admm.outer", "admm.cg_iters", "baselines", "seed", "data.kind", "data.seed",
    "data.ellipses_min", "data.ellipses_max", "test.images", "test.seed", "test.dir",
    "train.dir", "train.images", "train.steps", "train.batch", "train.lr", "train.width",
    "train.depth", "train.positional", "train.ema_half_life", "train.sigma_min",
    "train.sigma_max", "train.log_every", "train.patch_sizes", "train.weighting", "train.seed", "checkpoint",
    "oracle", "out", "generate.count", "synth.count", "ablate.axis", "ablate.values", "threads",
];

fn default_patch_sizes(patch: usize, depth: usize) -> Vec<(usize, f64)> {
    let small = (patch * 3 / 4).max(2 * depth + 1);
    if small >= patch {
        vec![(patch, 1.0)]
    } else {
        vec![(small, 0.3), (patch, 0.7)]
    }
}

fn parse_patch_sizes(list: &[String]) -> Result<Vec<(usize, f64)>, CliError> {
    list.iter()
        .map(|item| {
            let (s, p) = item
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("train.patch_sizes entry {item:?} is not size:prob")))?;
            let size = s.trim().parse().map_err(|e| CliError::Config(format!("patch size {s:?}: {e}")))?;
            let prob = p.trim().parse().map_err(|e| CliError::Config(format!("probability {p:?}: {e}")))?;
            Ok((size, prob))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        if let Some(bad) = raw.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(CliError::Config(format!("unknown config key {bad:?}")));
        }
        let problem = ProblemKind::parse(raw.get("problem").unwrap_or("ct20"))?;
        let (smax, smin) = problem.default_schedule();
        let patch = raw.parse("patch")?.unwrap_or(16);
        let depth = raw.parse("train.depth")?.unwrap_or(4);
        let seed = raw.parse("seed")?.unwrap_or(0);
        let data_seed = raw.parse("data.seed")?.unwrap_or(1);
        let lambda = raw.parse("lambda")?.unwrap_or(problem.default_lambda());
        let mut admm = AdmmConfig::new(lambda);
        admm.rho = raw.parse("admm.rho")?.unwrap_or(admm.rho);
        admm.outer = raw.parse("admm.outer")?.unwrap_or(admm.outer);
        admm.cg_iters = raw.parse("admm.cg_iters")?.unwrap_or(admm.cg_iters);
        let overlap = raw.parse("overlap")?.unwrap_or(8);
        let sampler = match raw.get("sampler") {
            Some(s) => SamplerKind::parse(s)?,
            None => SamplerKind::Padis,
        };
        let cfg = Self {
            problem,
            size: raw.parse("size")?.unwrap_or(64),
            patch,
            channels: raw.parse("channels")?.unwrap_or(1),
            steps: raw.parse("steps")?.unwrap_or(200),
            sigma_min: raw.parse("sigma_min")?.unwrap_or(smin),
            sigma_max: raw.parse("sigma_max")?.unwrap_or(smax),
            sampler,
            assembly: parse_assembly(raw.get("assembler").unwrap_or("stochastic"), overlap)?,
            zeta: raw.parse("zeta")?.unwrap_or(problem.default_zeta()),
            epsilon: raw.parse("epsilon")?.unwrap_or(1.0),
            r: raw.parse("r")?.unwrap_or(0.16),
            clamp_border: raw.bool("clamp_border")?.unwrap_or(false),
            noise: raw.parse("noise")?.unwrap_or(problem.default_noise()),
            lambda,
            admm,
            baselines: raw.bool("baselines")?.unwrap_or(true),
            seed,
            phantoms: PhantomSpec {
                kind: PhantomKind::parse(raw.get("data.kind").unwrap_or("shepp_logan"))?,
                size: raw.parse("size")?.unwrap_or(64),
                channels: raw.parse("channels")?.unwrap_or(1),
                ellipses_min: raw.parse("data.ellipses_min")?.unwrap_or(3),
                ellipses_max: raw.parse("data.ellipses_max")?.unwrap_or(8),
            },
            data_seed,
            test_seed: raw.parse("test.seed")?.unwrap_or(data_seed.wrapping_add(1)),
            test_images: raw.parse("test.images")?.unwrap_or(4),
            test_dir: raw.path("test.dir"),
            train_dir: raw.path("train.dir"),
            train: TrainSettings {
                images: raw.parse("train.images")?.unwrap_or(200),
                steps: raw.parse("train.steps")?.unwrap_or(5_000),
                batch: raw.parse("train.batch")?.unwrap_or(8),
                lr: raw.parse("train.lr")?.unwrap_or(2e-4),
                width: raw.parse("train.width")?.unwrap_or(32),
                depth,
                positional: raw.bool("train.positional")?.unwrap_or(true),
                ema_half_life: raw.parse("train.ema_half_life")?.unwrap_or(4_000.0),
                sigma_min: raw.parse("train.sigma_min")?.unwrap_or(0.002),
                sigma_max: raw.parse("train.sigma_max")?.unwrap_or(40.0),
                log_every: raw.parse("train.log_every")?.unwrap_or(50),
                patch_sizes: match raw.list("train.patch_sizes") {
                    Some(list) => parse_patch_sizes(&list)?,
                    None => default_patch_sizes(patch, depth),
                },
                weighting: match raw.get("train.weighting").unwrap_or("edm") {
                    "edm" => LossWeighting::Edm,
                    "uniform" => LossWeighting::Uniform,
                    other => {
                        return Err(CliError::Config(format!(
                            "unknown train.weighting {other:?} (edm, uniform)"
                        )))
                    }
                },
                seed: raw.parse("train.seed")?.unwrap_or(seed),
            },
            checkpoint: raw.path("checkpoint"),
            oracle: raw.bool("oracle")?.unwrap_or(false),
            out: raw.path("out"),
            generate_count: raw.parse("generate.count")?.unwrap_or(4),
            synth_count: raw.parse("synth.count")?.unwrap_or(200),
            ablate_axis: raw.get("ablate.axis").map(AblationAxis::parse).transpose()?,
            ablate_values: raw.list("ablate.values"),
            threads: raw.parse("threads")?,
        };
        cfg.validate()?;
        for dir in [&cfg.test_dir, &cfg.train_dir].into_iter().flatten() {
            if !dir.is_dir() {
                return Err(CliError::Io(format!("dataset directory {} does not exist", dir.display())));
            }
        }
        Ok(cfg)
    }

    pub fn defaults() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Err(e) = CanvasLayout::new(self.size, self.patch) {
            return bad(e.to_string());
        }
        self.phantoms.validate()?;
        if matches!(self.problem, ProblemKind::Ct { .. }) && self.channels != 1 {
            return bad("CT problems need single-channel images".into());
        }
        if let ProblemKind::Superres { factor } = self.problem {
            if self.size % factor != 0 {
                return bad(format!("image size {} is not divisible by {factor}", self.size));
            }
        }
        if let ProblemKind::Deblur { kernel } = self.problem {
            if kernel % 2 == 0 {
                return bad(format!("blur kernel {kernel} must be odd"));
            }
        }
        if self.noise < 0.0 || !(self.lambda > 0.0) {
            return bad("noise must be >= 0 and lambda > 0".into());
        }
        if self.test_images == 0 {
            return bad("test.images must be positive".into());
        }
        self.sampler_config(0).validate()?;
        if !self.oracle {
            self.train_config().validate()?;
        }
        Ok(())
    }

    pub fn layout(&self) -> CanvasLayout {
        CanvasLayout::new(self.size, self.patch).expect("validated")
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let mut s = SamplerConfig::new(self.steps, self.sigma_min, self.sigma_max, seed);
        s.zeta = self.zeta;
        s.epsilon = self.epsilon;
        s.r = self.r;
        s.clamp_border = self.clamp_border;
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            arch: NetArch {
                image_channels: self.channels,
                width: t.width,
                depth: t.depth,
                activation: Activation::Silu,
                positional: t.positional,
            },
            patch: self.patch,
            patch_sizes: t.patch_sizes.clone(),
            sigma_min: t.sigma_min,
            sigma_max: t.sigma_max,
            batch_size: t.batch,
            learning_rate: t.lr,
            ema_half_life: t.ema_half_life,
            iterations: t.steps,
            seed: t.seed,
            log_every: t.log_every,
            weighting: t.weighting,
        }
    }

    /// Output directory: the config's `out`, else `$PADIS_OUT/<verb>`, else
    /// `padis-out/<verb>`.
    pub fn out_dir(&self, verb: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => std::env::var_os(crate::OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("padis-out"))
                .join(verb),
        }
    }
}

/// Independent per-task seed derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_image(path: &Path, image: &Image) -> Result<(), CliError> {
    pnm::write(path, image, Depth::Sixteen).map_err(|e| match e {
        padis::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn check_images(images: &[Image], cfg: &ExperimentConfig, what: &str) -> Result<(), CliError> {
    let want = Shape::square(cfg.size, cfg.channels);
    match images.iter().find(|im| im.shape() != want) {
        Some(im) => Err(CliError::Config(format!("{what} image is {}, config expects {want}", im.shape()))),
        None => Ok(()),
    }
}

pub fn training_images(cfg: &ExperimentConfig) -> Result<Vec<Image>, CliError> {
    let images = match &cfg.train_dir {
        Some(dir) => synth::load_dataset(dir, Some(cfg.train.images))?,
        None => synth::phantoms(&cfg.phantoms, cfg.data_seed, cfg.train.images),
    };
    check_images(&images, cfg, "training")?;
    Ok(images)
}

pub fn test_images(cfg: &ExperimentConfig) -> Result<Vec<Image>, CliError> {
    let images = match &cfg.test_dir {
        Some(dir) => synth::load_dataset(dir, Some(cfg.test_images))?,
        None => synth::phantoms(&cfg.phantoms, cfg.test_seed, cfg.test_images),
    };
    check_images(&images, cfg, "test")?;
    Ok(images)
}

fn padded(cfg: &ExperimentConfig, images: &[Image]) -> Result<Vec<Image>, CliError> {
    let layout = cfg.layout();
    images.iter().map(|im| Ok(layout.pad_image(im)?)).collect()
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Trains on the configured training set and writes the checkpoint and
/// log under `out` (the checkpoint goes to `checkpoint` when given).
pub fn train_model(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Checkpoint, CliError> {
    create_dir(out)?;
    let canvases = padded(cfg, &training_images(cfg)?)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let ckpt = train(&canvases, &cfg.train_config(), Some(&mut log))?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ckpt.save(&path)?;
    Ok(ckpt)
}

/// The model a run samples from.
pub enum Model {
    Net(PatchDenoiserNet),
    /// Per-pixel Gaussian fitted to the padded training canvases.
    Oracle(GaussianPrior),
}

impl Model {
    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Net(n) => n,
            Model::Oracle(g) => g,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Model::Net(_) => "net",
            Model::Oracle(_) => "oracle",
        }
    }
}

/// Independent-pixel Gaussian with the empirical mean and variance of the
/// canvases. The zero frame gets zero variance.
pub fn fit_oracle(canvases: &[Image]) -> Result<GaussianPrior, CliError> {
    let first = canvases
        .first()
        .ok_or_else(|| CliError::Config("oracle prior needs at least one training image".into()))?;
    let n = canvases.len() as f64;
    let mut mean = Image::zeros(first.shape());
    for c in canvases {
        mean.axpy(1.0 / n, c)?;
    }
    let mut var = Image::zeros(first.shape());
    for c in canvases {
        let d = c.sub(&mean)?;
        var.axpy(1.0 / n, &d.zip_map(&d, |a, b| a * b)?)?;
    }
    Ok(GaussianPrior::new(mean, var)?)
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    if cfg.oracle {
        let canvases = padded(cfg, &training_images(cfg)?)?;
        return Ok(Model::Oracle(fit_oracle(&canvases)?));
    }
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config("no checkpoint given; pass --checkpoint or --oracle".into())
    })?;
    let ckpt = Checkpoint::load(path).map_err(|e| match e {
        padis::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })?;
    if ckpt.arch.image_channels != cfg.channels {
        return Err(CliError::Config(format!(
            "checkpoint has {} image channels, config has {}",
            ckpt.arch.image_channels, cfg.channels
        )));
    }
    Ok(Model::Net(ckpt.network(true)?))
}

pub fn build_operator(cfg: &ExperimentConfig) -> Result<Box<dyn LinearOperator>, CliError> {
    let shape = Shape::square(cfg.size, cfg.channels);
    Ok(match cfg.problem {
        ProblemKind::Ct { views } => {
            let geom = CtGeometry::new(views, cfg.size * 3 / 2, 1.0)?;
            Box::new(CgPinv::new(Radon::new(cfg.size, geom)?, 20))
        }
        ProblemKind::Deblur { kernel } => Box::new(BoxBlur::new(shape, kernel)?),
        ProblemKind::Superres { factor } => Box::new(Downsample::new(shape, factor)?),
        ProblemKind::Generate => {
            return Err(CliError::Config("the generate problem has no forward operator".into()))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "image_id,method,psnr,ssim";
pub const METRICS_FILE: &str = "metrics.csv";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:.4},{:.6}", self.image_id, self.method, psnr_for_csv(self.psnr), self.ssim)
    }
}

fn score(image_id: &str, method: &str, x: &Image, truth: &Image) -> Result<MetricRow, CliError> {
    Ok(MetricRow {
        image_id: image_id.into(),
        method: method.into(),
        psnr: psnr(x, truth, 1.0)?,
        ssim: ssim(x, truth)?,
    })
}

/// Per-method means over images, in first-appearance order. Failed runs
/// (NaN) are left out of the mean.
pub fn mean_rows(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let ok: Vec<_> = rows.iter().filter(|r| r.method == m && !r.psnr.is_nan()).collect();
            let n = ok.len() as f64;
            MetricRow {
                image_id: "mean".into(),
                method: m.into(),
                psnr: ok.iter().map(|r| psnr_for_csv(r.psnr)).sum::<f64>() / n,
                ssim: ok.iter().map(|r| r.ssim).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows.iter().chain(&mean_rows(rows)) {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub rows: Vec<MetricRow>,
    /// `(image_id, method, message)` of aborted runs.
    pub failures: Vec<(String, String, String)>,
}

impl RunSummary {
    pub fn mean(&self, method: &str) -> Option<MetricRow> {
        mean_rows(&self.rows).into_iter().find(|r| r.method == method)
    }
}

struct ImageResult {
    rows: Vec<MetricRow>,
    failures: Vec<(String, String, String)>,
}

/// Measures every test image, reconstructs it with the configured sampler
/// (and the classical baselines) and writes images, traces and
/// `metrics.csv` under `out`. A sampler that aborts is recorded with NaN
/// metrics and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<RunSummary, CliError> {
    if cfg.problem == ProblemKind::Generate {
        return Err(CliError::Config("use the generate verb for problem = generate".into()));
    }
    let truths = test_images(cfg)?;
    let op = build_operator(cfg)?;
    let layout = cfg.layout();
    let assembler = Assembler::new(layout, cfg.assembly)?;
    let prior = Prior::new(assembler, model.denoiser());
    for sub in ["images", "traces", "measurements"] {
        create_dir(&out.join(sub))?;
    }
    let ext = image_ext(cfg.channels);

    let results = truths
        .par_iter()
        .enumerate()
        .map(|(i, truth)| -> Result<ImageResult, CliError> {
            let id = format!("img{i:03}");
            let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            noise_rng.set_stream(2 * i as u64 + 1);
            let y = add_noise(&op.apply(truth)?, cfg.noise, &mut noise_rng)?;
            write_image(&out.join("images").join(format!("{id}_truth.{ext}")), truth)?;
            match cfg.problem {
                ProblemKind::Ct { .. } => {
                    let path = out.join("measurements").join(format!("{id}.sino"));
                    sinogram::write(&path, &y, sinogram::SinogramFormat::Csv)?;
                }
                _ => write_image(&out.join("measurements").join(format!("{id}_y.{ext}")), &y)?,
            }

            let mut rows = Vec::new();
            let mut failures = Vec::new();
            let method = cfg.sampler.name();
            let problem = Problem { op: op.as_ref(), y: &y, truth: Some(truth) };
            let sampler_cfg = cfg.sampler_config(derive_seed(cfg.seed, 2 * i as u64 + 2));
            match reconstruct(cfg.sampler, &prior, &problem, &sampler_cfg) {
                Ok(rec) => {
                    write_image(&out.join("images").join(format!("{id}_{method}.{ext}")), &rec.image)?;
                    let mut trace = String::from(TRACE_HEADER);
                    trace.push('\n');
                    for row in &rec.trace {
                        trace.push_str(&row.csv());
                        trace.push('\n');
                    }
                    write_text(&out.join("traces").join(format!("{id}_{method}.csv")), &trace)?;
                    rows.push(score(&id, method, &rec.image, truth)?);
                }
                Err(padis::Error::Numerical(msg)) => {
                    rows.push(MetricRow { image_id: id.clone(), method: method.into(), psnr: f64::NAN, ssim: f64::NAN });
                    failures.push((id.clone(), method.to_string(), msg));
                }
                Err(other) => return Err(other.into()),
            }

            if cfg.baselines {
                let (name, naive) = match cfg.problem {
                    ProblemKind::Ct { views } => {
                        let radon = Radon::new(cfg.size, CtGeometry::new(views, cfg.size * 3 / 2, 1.0)?)?;
                        ("fbp", fbp(&y, &radon)?)
                    }
                    ProblemKind::Deblur { .. } => ("naive", naive_baseline(&y, NaiveKind::Deblur, None)?),
                    ProblemKind::Superres { factor } => {
                        ("naive", naive_baseline(&y, NaiveKind::Superres(factor), None)?)
                    }
                    ProblemKind::Generate => unreachable!(),
                };
                write_image(&out.join("images").join(format!("{id}_{name}.{ext}")), &naive)?;
                rows.push(score(&id, name, &naive, truth)?);
                match admm_tv(&y, op.as_ref(), &cfg.admm) {
                    Ok(res) => {
                        write_image(&out.join("images").join(format!("{id}_admm-tv.{ext}")), &res.image)?;
                        rows.push(score(&id, "admm-tv", &res.image, truth)?);
                    }
                    Err(padis::Error::Numerical(msg)) => {
                        rows.push(MetricRow { image_id: id.clone(), method: "admm-tv".into(), psnr: f64::NAN, ssim: f64::NAN });
                        failures.push((id.clone(), "admm-tv".into(), msg));
                    }
                    Err(other) => return Err(other.into()),
                }
            }
            Ok(ImageResult { rows, failures })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut summary = RunSummary::default();
    for r in results {
        summary.rows.extend(r.rows);
        summary.failures.extend(r.failures);
    }
    write_text(&out.join(METRICS_FILE), &metrics_csv(&summary.rows))?;
    if !summary.failures.is_empty() {
        let mut log = String::new();
        for (id, method, msg) in &summary.failures {
            writeln!(log, "{id},{method},{msg}").unwrap();
        }
        write_text(&out.join("failures.csv"), &log)?;
    }
    Ok(summary)
}

pub const MOMENTS_FILE: &str = "moments.csv";

/// Unconditional samples plus a comparison of their pixel moments with
/// the per-pixel Gaussian fitted to the training set.
pub fn run_generate(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<Vec<Image>, CliError> {
    create_dir(&out.join("images"))?;
    let layout = cfg.layout();
    let prior = Prior::new(Assembler::new(layout, cfg.assembly)?, model.denoiser());
    let ext = image_ext(cfg.channels);
    let mut sampler_cfg = cfg.sampler_config(0);
    sampler_cfg.zeta = 0.0;
    let samples = (0..cfg.generate_count)
        .into_par_iter()
        .map(|i| -> Result<Image, CliError> {
            let mut c = sampler_cfg.clone();
            c.seed = derive_seed(cfg.seed, i as u64);
            let img = generate(&prior, cfg.channels, &c)?.image;
            write_image(&out.join("images").join(format!("sample_{i:03}.{ext}")), &img)?;
            Ok(img)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let reference = match model {
        Model::Oracle(g) => g.clone(),
        Model::Net(_) => fit_oracle(&padded(cfg, &training_images(cfg)?)?)?,
    };
    let mu = layout.crop_center(reference.mean())?;
    let var = layout.crop_center(reference.variance())?;
    let n = samples.len() as f64;
    let mut mean = Image::zeros(mu.shape());
    for s in &samples {
        mean.axpy(1.0 / n, s)?;
    }
    let mut sample_var = Image::zeros(mu.shape());
    if samples.len() > 1 {
        for s in &samples {
            let d = s.sub(&mean)?;
            sample_var.axpy(1.0 / (n - 1.0), &d.zip_map(&d, |a, b| a * b)?)?;
        }
    }
    let mean_abs_err = mean.sub(&mu)?.data().iter().map(|v| v.abs()).sum::<f64>() / mu.len() as f64;
    let var_ratio = sample_var.data().iter().sum::<f64>() / var.data().iter().sum::<f64>().max(1e-300);
    let report = format!(
        "statistic,value\nsamples,{}\nreference,{}\nmean_abs_error,{mean_abs_err:.6e}\nvariance_ratio,{var_ratio:.6}\n",
        samples.len(),
        model.label()
    );
    write_text(&out.join(MOMENTS_FILE), &report)?;
    Ok(samples)
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "axis,value,method,psnr,ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Runs the configured problem once per value of `axis`, each in its own
/// subdirectory, and writes one mean row per setting to `ablation.csv`.
/// Positional encoding and dataset size retrain the network; the other
/// axes reuse one model.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<Vec<AblationRow>, CliError> {
    let values = cfg.ablate_values.clone().unwrap_or_else(|| axis.default_values());
    let retrains = matches!(axis, AblationAxis::PositionalEncoding | AblationAxis::DatasetSize);
    if retrains && cfg.oracle {
        return Err(CliError::Config(format!("the {} axis needs a trained network, not --oracle", axis.name())));
    }
    create_dir(out)?;
    // the oracle is fitted to one canvas size, so a patch sweep refits it
    let refit = cfg.oracle && matches!(axis, AblationAxis::PatchSize);
    let shared = if retrains || refit {
        None
    } else if cfg.oracle || cfg.checkpoint.is_some() {
        Some(load_model(cfg)?)
    } else {
        let dir = out.join("model");
        Some(Model::Net(train_model(cfg, &dir, None)?.network(true)?))
    };

    let mut rows = Vec::new();
    for value in &values {
        let mut c = cfg.clone();
        c.baselines = false;
        let bad = || CliError::Config(format!("bad {} value {value:?}", axis.name()));
        match axis {
            AblationAxis::PatchSize => {
                c.patch = value.parse().map_err(|_| bad())?;
                c.validate()?;
            }
            AblationAxis::Sampler => c.sampler = SamplerKind::parse(value)?,
            AblationAxis::PositionalEncoding => {
                c.train.positional = match value.as_str() {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad()),
                }
            }
            AblationAxis::DatasetSize => {
                c.train.images = value.parse().map_err(|_| bad())?;
            }
        }
        let dir = out.join(format!("{}_{value}", axis.name()));
        let owned;
        let model = match &shared {
            Some(m) => m,
            None if refit => {
                owned = load_model(&c)?;
                &owned
            }
            None => {
                owned = Model::Net(train_model(&c, &dir.join("model"), None)?.network(true)?);
                &owned
            }
        };
        let summary = run_experiment(&c, model, &dir)?;
        let method = c.sampler.name();
        let mean = summary.mean(method).ok_or_else(|| CliError::Numerical(format!("no results for {value}")))?;
        rows.push(AblationRow {
            axis,
            value: value.clone(),
            method: method.into(),
            psnr: mean.psnr,
            ssim: mean.ssim,
        });
    }
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &rows {
        writeln!(csv, "{},{},{},{:.4},{:.6}", r.axis.name(), r.value, r.method, psnr_for_csv(r.psnr), r.ssim).unwrap();
    }
    write_text(&out.join(ABLATION_FILE), &csv)?;
    Ok(rows)
}

/// Scores every `<id>_<method>.pgm|ppm` in `dir` against `<id>_truth.*`.
pub fn metrics_for_dir(dir: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    entries.sort();
    let mut rows = Vec::new();
    for path in &entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((id, method)) = stem.split_once('_') else { continue };
        if method == "truth" || method == "y" {
            continue;
        }
        let truth_path = path.with_file_name(format!("{id}_truth.{}", path.extension().unwrap().to_str().unwrap()));
        if !truth_path.exists() {
            continue;
        }
        let x = pnm::read(path)?;
        let truth = pnm::read(&truth_path)?;
        rows.push(score(id, method, &x, &truth)?);
    }
    if rows.is_empty() {
        return Err(CliError::Io(format!("{}: no <id>_<method> images with a matching truth", dir.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_names_round_trip_and_defaults_follow_the_problem() {
        for name in ["ct8", "ct20", "ct60", "deblur9", "deblur17", "sr4", "generate"] {
            assert_eq!(ProblemKind::parse(name).unwrap().name(), name);
        }
        assert!(ProblemKind::parse("mri").is_err());
        assert!(ProblemKind::parse("ct").is_err());
        assert_eq!(ProblemKind::parse("ct20").unwrap().default_schedule(), (10.0, 0.002));
        assert_eq!(ProblemKind::parse("ct8").unwrap().default_schedule(), (10.0, 0.003));
        assert_eq!(ProblemKind::parse("deblur9").unwrap().default_schedule(), (40.0, 0.005));
        assert_eq!(ProblemKind::parse("sr4").unwrap().default_schedule(), (40.0, 0.01));
        assert_eq!(ProblemKind::parse("sr4").unwrap().default_lambda(), 0.006);
        assert_eq!(ProblemKind::parse("deblur9").unwrap().default_noise(), 0.01);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let raw = RawConfig::parse_str("problme = ct20\n", Path::new(".")).unwrap();
        assert!(matches!(ExperimentConfig::from_raw(&raw), Err(CliError::Config(_))));
        let raw = RawConfig::parse_str("patch = 64\n", Path::new(".")).unwrap();
        assert!(matches!(ExperimentConfig::from_raw(&raw), Err(CliError::Config(_))));
        let raw = RawConfig::parse_str("problem = ct20\nchannels = 3\n", Path::new(".")).unwrap();
        assert!(matches!(ExperimentConfig::from_raw(&raw), Err(CliError::Config(_))));
    }

    #[test]
    fn default_config_is_the_desk_preset() {
        let cfg = ExperimentConfig::defaults();
        assert_eq!((cfg.size, cfg.patch, cfg.steps), (64, 16, 200));
        assert_eq!(cfg.layout().pad(), 16);
        assert_eq!(cfg.train.patch_sizes, vec![(12, 0.3), (16, 0.7)]);
    }

    #[test]
    fn means_skip_failed_runs() {
        let row = |id: &str, m: &str, p: f64| MetricRow { image_id: id.into(), method: m.into(), psnr: p, ssim: 0.5 };
        let rows = vec![row("a", "x", 20.0), row("b", "x", f64::NAN), row("a", "y", f64::INFINITY)];
        let means = mean_rows(&rows);
        assert_eq!(means[0].psnr, 20.0);
        assert_eq!(means[1].psnr, 99.0);
        assert!(metrics_csv(&rows).starts_with("image_id,method,psnr,ssim\na,x,20.0000,0.500000\nb,x,NaN,0.500000\n"));
    }
}
