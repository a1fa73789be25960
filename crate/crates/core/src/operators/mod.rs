//! Linear forward models `y = A(x)` with adjoints and, where cheap, pseudo-inverses.
//!
//! Measurements are stored as [`Image`]s: a sinogram is `views × detectors`,
//! blurred and downsampled measurements are ordinary images.

mod blur;
mod radon;
pub mod sinogram;

use rand::Rng;
use rand_distr::StandardNormal;

pub use blur::{BoxBlur, Downsample};
pub use radon::{CtGeometry, Radon};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};

pub type Measurement = Image;

pub trait LinearOperator: Send + Sync {
    fn name(&self) -> &str;
    fn input_shape(&self) -> Shape;
    fn output_shape(&self) -> Shape;
    fn apply(&self, x: &Image) -> Result<Measurement>;
    fn adjoint(&self, y: &Measurement) -> Result<Image>;

    fn has_pinv(&self) -> bool {
        false
    }

    fn pinv(&self, _y: &Measurement) -> Result<Image> {
        Err(Error::Unsupported(format!(
            "{} has no pseudo-inverse",
            self.name()
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Identity {
    shape: Shape,
}

impl Identity {
    pub fn new(shape: Shape) -> Self {
        Self { shape }
    }
}

impl LinearOperator for Identity {
    fn name(&self) -> &str {
        "identity"
    }
    fn input_shape(&self) -> Shape {
        self.shape
    }
    fn output_shape(&self) -> Shape {
        self.shape
    }
    fn apply(&self, x: &Image) -> Result<Measurement> {
        x.ensure_shape(self.shape)?;
        Ok(x.clone())
    }
    fn adjoint(&self, y: &Measurement) -> Result<Image> {
        y.ensure_shape(self.shape)?;
        Ok(y.clone())
    }
    fn has_pinv(&self) -> bool {
        true
    }
    fn pinv(&self, y: &Measurement) -> Result<Image> {
        self.adjoint(y)
    }
}

/// Wraps an operator and replaces its pseudo-inverse by a fixed number of
/// conjugate-gradient iterations on `AᵀA x = Aᵀy`, started from zero.
pub struct CgPinv<A> {
    pub op: A,
    pub iterations: usize,
}

impl<A: LinearOperator> CgPinv<A> {
    pub fn new(op: A, iterations: usize) -> Self {
        Self { op, iterations }
    }
}

impl<A: LinearOperator> LinearOperator for CgPinv<A> {
    fn name(&self) -> &str {
        self.op.name()
    }
    fn input_shape(&self) -> Shape {
        self.op.input_shape()
    }
    fn output_shape(&self) -> Shape {
        self.op.output_shape()
    }
    fn apply(&self, x: &Image) -> Result<Measurement> {
        self.op.apply(x)
    }
    fn adjoint(&self, y: &Measurement) -> Result<Image> {
        self.op.adjoint(y)
    }
    fn has_pinv(&self) -> bool {
        true
    }
    fn pinv(&self, y: &Measurement) -> Result<Image> {
        let b = self.op.adjoint(y)?;
        let x0 = Image::zeros(b.shape());
        conjugate_gradient(
            |v| self.op.adjoint(&self.op.apply(v)?),
            &b,
            x0,
            self.iterations,
        )
    }
}

/// Plain CG for a symmetric positive semi-definite `normal` operator.
/// Stops early once the residual vanishes.
pub fn conjugate_gradient(
    normal: impl Fn(&Image) -> Result<Image>,
    b: &Image,
    mut x: Image,
    iterations: usize,
) -> Result<Image> {
    let mut r = b.sub(&normal(&x)?)?;
    let mut p = r.clone();
    let mut rr = r.dot(&r)?;
    let floor = 1e-30 * b.dot(b)?.max(f64::MIN_POSITIVE);
    for _ in 0..iterations {
        if rr <= floor {
            break;
        }
        let ap = normal(&p)?;
        let pap = p.dot(&ap)?;
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        let rr_new = r.dot(&r)?;
        p = r.zip_map(&p, |ri, pi| ri + rr_new / rr * pi)?;
        rr = rr_new;
    }
    Ok(x)
}

/// `y + sigma * n` with `n` standard normal.
pub fn add_noise(y: &Measurement, sigma: f64, rng: &mut impl Rng) -> Result<Measurement> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "measurement noise {sigma} must be non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// Range-space replacement `D + A†(y - A D)`.
pub fn ddnm_project(d: &Image, y: &Measurement, op: &dyn LinearOperator) -> Result<Image> {
    if !op.has_pinv() {
        return Err(Error::Unsupported(format!(
            "range-null-space projection needs a pseudo-inverse; {} has none",
            op.name()
        )));
    }
    let resid = y.sub(&op.apply(d)?)?;
    d.add(&op.pinv(&resid)?)
}

/// Randomized linearity and adjoint checks; `Err(Numerical)` on failure.
pub fn self_check(op: &dyn LinearOperator, rng: &mut impl Rng, trials: usize) -> Result<()> {
    fn rand_image(shape: Shape, rng: &mut impl Rng) -> Image {
        Image::from_fn(shape, |_, _, _| rng.sample::<f64, _>(StandardNormal))
    }
    for _ in 0..trials {
        let x = rand_image(op.input_shape(), rng);
        let z = rand_image(op.input_shape(), rng);
        let y = rand_image(op.output_shape(), rng);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

        let mut combo = x.scale(a);
        combo.axpy(b, &z)?;
        let lhs = op.apply(&combo)?;
        let mut rhs = op.apply(&x)?.scale(a);
        rhs.axpy(b, &op.apply(&z)?)?;
        let scale = lhs.norm().max(rhs.norm()).max(1e-300);
        if lhs.sub(&rhs)?.norm() / scale > 1e-6 {
            return Err(Error::Numerical(format!("{} failed the linearity check", op.name())));
        }

        let ax_y = op.apply(&x)?.dot(&y)?;
        let x_aty = x.dot(&op.adjoint(&y)?)?;
        if (ax_y - x_aty).abs() > 1e-4 * ax_y.abs().max(x_aty.abs()).max(1e-300) {
            return Err(Error::Numerical(format!(
                "{} failed the adjoint check: {ax_y} vs {x_aty}",
                op.name()
            )));
        }
    }
    Ok(())
}
