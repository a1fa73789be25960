//! PSNR and SSIM.

use crate::error::{Error, Result};
use crate::image::Image;

/// Value written to CSV files in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(range² / MSE)`, with the MSE taken jointly over all channels.
/// Identical images give `+inf`.
pub fn psnr(x: &Image, reference: &Image, data_range: f64) -> Result<f64> {
    x.ensure_same_shape(reference)?;
    if !(data_range > 0.0) {
        return Err(Error::InvalidParameter(format!("data range {data_range} must be positive")));
    }
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// PSNR clamped for tabular output.
pub fn psnr_for_csv(value: f64) -> f64 {
    if value.is_nan() {
        value
    } else {
        value.min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable weighted window sums at every position where the window fits.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| kernel[t] * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| kernel[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), data range 1, and
/// `C1 = 0.01²`, `C2 = 0.03²`. Local statistics use population moments and
/// only positions where the whole window lies inside the image are
/// averaged. Multichannel images average the per-channel scores.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    x.ensure_same_shape(reference)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let kernel = gaussian_window();
    let mut total = 0.0;
    for c in 0..x.channels() {
        let (a, b) = (x.plane(c), reference.plane(c));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
        };
        let ux = filter_valid(a, h, w, &kernel);
        let uy = filter_valid(b, h, w, &kernel);
        let uxx = filter_valid(&prod(&|p, _| p * p), h, w, &kernel);
        let uyy = filter_valid(&prod(&|_, q| q * q), h, w, &kernel);
        let uxy = filter_valid(&prod(&|p, q| p * q), h, w, &kernel);
        let mut sum = 0.0;
        for i in 0..ux.len() {
            let vx = uxx[i] - ux[i] * ux[i];
            let vy = uyy[i] - uy[i] * uy[i];
            let vxy = uxy[i] - ux[i] * uy[i];
            sum += (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2)
                / ((ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2));
        }
        total += sum / ux.len() as f64;
    }
    Ok(total / x.channels() as f64)
}
