//! Reference reconstructions without a learned prior.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::operators::{conjugate_gradient, Downsample, LinearOperator, Measurement, Radon};

/// Spatial-domain Ram-Lak kernel sampled at the detector spacing `tau`.
fn ram_lak(len: usize, tau: f64) -> Vec<f64> {
    // taps at offsets -(len-1) ..= len-1, stored in wrap-around order
    let size = 2 * len - 1;
    let mut h = vec![0.0; size];
    for (i, v) in h.iter_mut().enumerate() {
        let k = if i < len { i as isize } else { i as isize - size as isize };
        *v = if k == 0 {
            1.0 / (4.0 * tau * tau)
        } else if k % 2 == 0 {
            0.0
        } else {
            -1.0 / (PI * PI * (k * k) as f64 * tau * tau)
        };
    }
    h
}

/// Filtered back-projection: every sinogram row is convolved with the
/// band-limited ramp kernel (zero-padded FFT, so the convolution is linear),
/// multiplied by the detector spacing, backprojected with the projector's
/// transpose, and weighted by the angular step `π / views`.
pub fn fbp(sino: &Measurement, op: &Radon) -> Result<Image> {
    sino.ensure_shape(op.output_shape())?;
    let geom = op.geometry();
    let dets = geom.detectors;
    let size = (2 * dets - 1).next_power_of_two();
    let kernel = ram_lak(dets, geom.spacing);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut kf = vec![Complex::new(0.0, 0.0); size];
    for (i, &v) in kernel.iter().enumerate() {
        let slot = if i < dets { i } else { size - (kernel.len() - i) };
        kf[slot].re = v;
    }
    fwd.process(&mut kf);

    let mut filtered = Image::zeros(sino.shape());
    let mut buf = vec![Complex::new(0.0, 0.0); size];
    for v in 0..geom.views {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for d in 0..dets {
            buf[d].re = sino.at(0, v, d);
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kf) {
            *b *= k;
        }
        inv.process(&mut buf);
        for d in 0..dets {
            filtered.set(0, v, d, buf[d].re / size as f64 * geom.spacing);
        }
    }
    Ok(op.adjoint(&filtered)?.scale(PI / geom.views as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaiveKind {
    /// Filtered back-projection.
    Ct,
    /// The blurred measurement itself.
    Deblur,
    /// Nearest-neighbour upsampling by the given factor.
    Superres(usize),
}

pub fn naive_baseline(y: &Measurement, kind: NaiveKind, ct: Option<&Radon>) -> Result<Image> {
    match kind {
        NaiveKind::Ct => {
            let op = ct.ok_or_else(|| Error::InvalidParameter("CT baseline needs the projector".into()))?;
            fbp(y, op)
        }
        NaiveKind::Deblur => Ok(y.clone()),
        NaiveKind::Superres(f) => {
            let shape = Shape::new(y.height() * f, y.width() * f, y.channels());
            Downsample::new(shape, f)?.pinv(y)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmConfig {
    pub lambda: f64,
    pub rho: f64,
    pub outer: usize,
    pub cg_iters: usize,
}

impl AdmmConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            rho: 1.0,
            outer: 100,
            cg_iters: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdmmResult {
    pub image: Image,
    /// Objective after each outer iteration.
    pub objective: Vec<f64>,
}

/// Forward differences along rows and columns with a zero last difference
/// (Neumann boundary). Output has two planes per input channel: `[dx, dy]`.
pub fn gradient(x: &Image) -> Image {
    let (h, w, ch) = (x.height(), x.width(), x.channels());
    let mut g = Image::zeros(Shape::new(h, w, 2 * ch));
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                let v = x.at(c, r, col);
                if col + 1 < w {
                    g.set(2 * c, r, col, x.at(c, r, col + 1) - v);
                }
                if r + 1 < h {
                    g.set(2 * c + 1, r, col, x.at(c, r + 1, col) - v);
                }
            }
        }
    }
    g
}

/// Adjoint of [`gradient`].
pub fn gradient_adjoint(g: &Image) -> Image {
    let (h, w, ch) = (g.height(), g.width(), g.channels() / 2);
    let mut x = Image::zeros(Shape::new(h, w, ch));
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                let mut v = 0.0;
                if col + 1 < w {
                    v -= g.at(2 * c, r, col);
                }
                if col > 0 {
                    v += g.at(2 * c, r, col - 1);
                }
                if r + 1 < h {
                    v -= g.at(2 * c + 1, r, col);
                }
                if r > 0 {
                    v += g.at(2 * c + 1, r - 1, col);
                }
                x.set(c, r, col, v);
            }
        }
    }
    x
}

fn tv(x: &Image) -> f64 {
    gradient(x).data().iter().map(|v| v.abs()).sum()
}

pub fn tv_objective(x: &Image, y: &Measurement, op: &dyn LinearOperator, lambda: f64) -> Result<f64> {
    let r = op.apply(x)?.sub(y)?;
    Ok(0.5 * r.dot(&r)? + lambda * tv(x))
}

/// Minimizes `½|y - Ax|² + λ TV(x)` (anisotropic) by ADMM on the split
/// `z = ∇x`, starting from `Aᵀy`. The x-update runs a few CG iterations on
/// `(AᵀA + ρ∇ᵀ∇) x = Aᵀy + ρ∇ᵀ(z - u)`, warm-started.
pub fn admm_tv(y: &Measurement, op: &dyn LinearOperator, cfg: &AdmmConfig) -> Result<AdmmResult> {
    if !(cfg.lambda > 0.0) || !(cfg.rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ADMM needs positive lambda and rho, got {} and {}",
            cfg.lambda, cfg.rho
        )));
    }
    y.ensure_shape(op.output_shape())?;
    let aty = op.adjoint(y)?;
    let mut x = Image::zeros(aty.shape());
    let mut z = gradient(&x);
    let mut u = Image::zeros(z.shape());
    let thresh = cfg.lambda / cfg.rho;
    let mut objective = Vec::with_capacity(cfg.outer);
    let mut rising = 0;
    for it in 0..cfg.outer {
        let mut rhs = aty.clone();
        rhs.axpy(cfg.rho, &gradient_adjoint(&z.sub(&u)?))?;
        x = conjugate_gradient(
            |v| {
                let mut out = op.adjoint(&op.apply(v)?)?;
                out.axpy(cfg.rho, &gradient_adjoint(&gradient(v)))?;
                Ok(out)
            },
            &rhs,
            x,
            cfg.cg_iters,
        )?;
        let gx = gradient(&x);
        z = gx.add(&u)?.map(|v| v.signum() * (v.abs() - thresh).max(0.0));
        u.axpy(1.0, &gx.sub(&z)?)?;

        let obj = tv_objective(&x, y, op, cfg.lambda)?;
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("ADMM objective non-finite at iteration {it}")));
        }
        if objective.last().is_some_and(|&prev| obj > prev) {
            rising += 1;
            if rising >= 10 {
                return Err(Error::Numerical(format!(
                    "ADMM diverging: objective rose for 10 consecutive iterations (iteration {it})"
                )));
            }
        } else {
            rising = 0;
        }
        objective.push(obj);
    }
    Ok(AdmmResult { image: x, objective })
}
