//! Fully convolutional patch denoiser with a hand-written reverse pass.
//!
//! The network is a stack of 3×3 zero-padded convolutions. Its input is the
//! noisy image channels followed by the two positional planes and a constant
//! plane holding `ln(sigma)`. Convolutions are lowered to matrix products
//! through an im2col buffer, which the reverse pass reuses.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::PositionalGrid;
use crate::image::{Image, Shape};
use crate::scoremodel::{Denoiser, Linearization, Placement};

const TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    /// No nonlinearity; used for linear models and tests.
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidParameter(format!("unknown activation {other:?}"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Hyperparameters that fix the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetArch {
    pub image_channels: usize,
    pub width: usize,
    /// Number of convolution layers.
    pub depth: usize,
    pub activation: Activation,
    /// When false the positional planes are fed as zeros.
    pub positional: bool,
}

impl NetArch {
    pub fn desk_default(image_channels: usize) -> Self {
        Self {
            image_channels,
            width: 32,
            depth: 4,
            activation: Activation::Silu,
            positional: true,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + 3
    }

    /// `(in, out)` channels of every layer in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let cin = if l == 0 { self.input_channels() } else { self.width };
                let cout = if l + 1 == self.depth {
                    self.image_channels
                } else {
                    self.width
                };
                (cin, cout)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(cin, cout)| cout * cin * TAPS + cout)
            .sum()
    }

    /// Side of the square of input pixels that influences one output pixel.
    pub fn receptive_field(&self) -> usize {
        2 * self.depth + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.depth == 0 || (self.depth > 1 && self.width == 0) {
            return Err(Error::InvalidParameter(format!(
                "degenerate architecture {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerView {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
}

fn layer_views(arch: &NetArch) -> Vec<LayerView> {
    let mut offset = 0;
    arch.layer_dims()
        .into_iter()
        .map(|(cin, cout)| {
            let weight = offset;
            let bias = weight + cout * cin * TAPS;
            offset = bias + cout;
            LayerView {
                cin,
                cout,
                weight,
                bias,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDenoiserNet {
    arch: NetArch,
    layers: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Standard deviation of the data assumed by the preconditioning.
pub const SIGMA_DATA: f64 = 0.5;

/// Noise-dependent input and output scalings that keep the raw network's
/// input and target near unit variance at every noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

impl Precond {
    pub fn new(sigma: f64) -> Self {
        let sd2 = SIGMA_DATA * SIGMA_DATA;
        let total = sigma * sigma + sd2;
        Self {
            c_skip: sd2 / total,
            c_out: sigma * SIGMA_DATA / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
        }
    }
}

/// Output of `denoise_pass` with the state needed to pull gradients back.
pub struct Pass {
    pub output: Image,
    tape: Tape,
    pre: Precond,
}

/// Activations kept from a forward pass.
pub struct Tape {
    height: usize,
    width: usize,
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl PatchDenoiserNet {
    pub fn new(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::shape(arch.param_count(), params.len()));
        }
        Ok(Self {
            layers: arch.layer_dims(),
            arch,
            params,
        })
    }

    /// He-style Gaussian initialization; the output layer starts small.
    pub fn init(arch: NetArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let views = layer_views(&arch);
        let last = views.len() - 1;
        for (l, v) in views.iter().enumerate() {
            let fan_in = (v.cin * TAPS) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if l == last {
                std *= 0.1;
            }
            for w in &mut params[v.weight..v.bias] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self::new(arch, params)
    }

    /// Passes the image channels straight through every layer's center tap.
    /// Exact for `Identity` activation, and for `Relu` on non-negative input.
    pub fn identity(arch: NetArch) -> Result<Self> {
        if arch.depth > 1 && arch.width < arch.image_channels {
            return Err(Error::InvalidParameter(
                "identity network needs width >= image channels".into(),
            ));
        }
        let mut params = vec![0.0; arch.param_count()];
        for v in layer_views(&arch) {
            for c in 0..arch.image_channels {
                params[v.weight + (c * v.cin + c) * TAPS + 4] = 1.0;
            }
        }
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Stacks `[x, pos_x, pos_y, ln(sigma)]` into the raw network input.
    pub fn build_input(&self, x: &Image, sigma: f64, positions: Option<&Image>) -> Result<Image> {
        if x.channels() != self.arch.image_channels {
            return Err(Error::shape(
                format!("{} image channels", self.arch.image_channels),
                x.channels(),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("noise level {sigma} must be positive")));
        }
        let (h, w) = (x.height(), x.width());
        let mut input = Image::zeros(Shape::new(h, w, self.arch.input_channels()));
        let c = self.arch.image_channels;
        let n = h * w;
        input.data_mut()[..c * n].copy_from_slice(x.data());
        if let (true, Some(pos)) = (self.arch.positional, positions) {
            pos.ensure_shape(Shape::new(h, w, 2))?;
            input.data_mut()[c * n..(c + 2) * n].copy_from_slice(pos.data());
        }
        input.plane_mut(c + 2).fill(sigma.ln());
        Ok(input)
    }

    /// Denoised estimate `c_skip x + c_out F(c_in x, pos, ln sigma)`.
    pub fn denoise_pass(&self, x: &Image, sigma: f64, positions: Option<&Image>) -> Result<Pass> {
        let pre = Precond::new(sigma);
        let input = self.build_input(&x.scale(pre.c_in), sigma, positions)?;
        let (raw, tape) = self.forward_tape(&input)?;
        let mut output = raw.scale(pre.c_out);
        output.axpy(pre.c_skip, x)?;
        Ok(Pass { output, tape, pre })
    }

    /// Pulls a cotangent of the denoised estimate back to the noisy image,
    /// optionally accumulating the parameter gradient.
    pub fn pass_backward(&self, pass: &Pass, v: &Image, param_grad: Option<&mut [f64]>) -> Result<Image> {
        let mut g = self.backward(&pass.tape, &v.scale(pass.pre.c_out), param_grad)?;
        g.truncate(v.len());
        let mut gx = Image::new(v.shape(), g)?.scale(pass.pre.c_in);
        gx.axpy(pass.pre.c_skip, v)?;
        Ok(gx)
    }

    pub fn forward(&self, input: &Image) -> Result<Image> {
        self.forward_tape(input).map(|(out, _)| out)
    }

    pub fn forward_tape(&self, input: &Image) -> Result<(Image, Tape)> {
        if input.channels() != self.arch.input_channels() {
            return Err(Error::shape(
                format!("{} input channels", self.arch.input_channels()),
                input.channels(),
            ));
        }
        let (h, w) = (input.height(), input.width());
        let hw = h * w;
        let views = layer_views(&self.arch);
        let mut tape = Tape {
            height: h,
            width: w,
            cols: Vec::with_capacity(views.len()),
            pre: Vec::with_capacity(views.len()),
        };
        let mut act = input.data().to_vec();
        for (l, v) in views.iter().enumerate() {
            let col = im2col(&act, v.cin, h, w);
            let mut z = vec![0.0; v.cout * hw];
            for (o, chunk) in z.chunks_exact_mut(hw).enumerate() {
                chunk.fill(self.params[v.bias + o]);
            }
            gemm(
                v.cout,
                v.cin * TAPS,
                hw,
                &self.params[v.weight..v.bias],
                false,
                &col,
                false,
                &mut z,
                1.0,
            );
            tape.cols.push(col);
            if l + 1 < views.len() {
                let a = self.arch.activation;
                act = z.iter().map(|&t| a.apply(t)).collect();
                tape.pre.push(z);
            } else {
                act = z;
            }
        }
        let out = Image::new(Shape::new(h, w, self.arch.image_channels), act)?;
        Ok((out, tape))
    }

    /// Pulls `grad_out` back through the network. Returns the gradient with
    /// respect to every input channel and, if requested, accumulates the
    /// parameter gradient into `param_grad`.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &Image,
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let (h, w) = (tape.height, tape.width);
        let hw = h * w;
        grad_out.ensure_shape(Shape::new(h, w, self.arch.image_channels))?;
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::shape(self.params.len(), g.len()));
            }
        }
        let views = layer_views(&self.arch);
        let mut grad = grad_out.data().to_vec();
        for l in (0..views.len()).rev() {
            let v = views[l];
            if l + 1 < views.len() {
                let a = self.arch.activation;
                for (g, &z) in grad.iter_mut().zip(&tape.pre[l]) {
                    *g *= a.derivative(z);
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                for (o, chunk) in grad.chunks_exact(hw).enumerate() {
                    pg[v.bias + o] += chunk.iter().sum::<f64>();
                }
                gemm(
                    v.cout,
                    hw,
                    v.cin * TAPS,
                    &grad,
                    false,
                    &tape.cols[l],
                    true,
                    &mut pg[v.weight..v.bias],
                    1.0,
                );
            }
            let mut gcol = vec![0.0; v.cin * TAPS * hw];
            gemm(
                v.cin * TAPS,
                v.cout,
                hw,
                &self.params[v.weight..v.bias],
                true,
                &grad,
                false,
                &mut gcol,
                0.0,
            );
            grad = col2im(&gcol, v.cin, h, w);
        }
        Ok(grad)
    }

    fn positions_for(&self, x: &Image, at: Option<Placement>) -> Result<Option<Image>> {
        match (self.arch.positional, at) {
            (true, Some(at)) => {
                let grid = PositionalGrid::new(at.canvas_side)?;
                grid.window(at.row, at.col, x.height(), x.width()).map(Some)
            }
            _ => Ok(None),
        }
    }
}

impl Denoiser for PatchDenoiserNet {
    fn denoise(&self, x: &Image, sigma: f64, at: Option<Placement>) -> Result<Image> {
        let pos = self.positions_for(x, at)?;
        Ok(self.denoise_pass(x, sigma, pos.as_ref())?.output)
    }

    fn vjp(&self, x: &Image, sigma: f64, at: Option<Placement>, v: &Image) -> Result<Image> {
        self.linearize(x, sigma, at)?.vjp(v)
    }

    fn linearize<'a>(
        &'a self,
        x: &Image,
        sigma: f64,
        at: Option<Placement>,
    ) -> Result<Box<dyn Linearization + 'a>> {
        let pos = self.positions_for(x, at)?;
        let pass = self.denoise_pass(x, sigma, pos.as_ref())?;
        Ok(Box::new(NetLinearization { net: self, pass }))
    }
}

struct NetLinearization<'a> {
    net: &'a PatchDenoiserNet,
    pass: Pass,
}

impl Linearization for NetLinearization<'_> {
    fn output(&self) -> &Image {
        &self.pass.output
    }

    fn vjp(&self, v: &Image) -> Result<Image> {
        v.ensure_same_shape(&self.pass.output)?;
        self.net.pass_backward(&self.pass, v, None)
    }
}

/// Row `(c*9 + tap)` holds channel `c` shifted by that tap, zero outside.
fn im2col(src: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; channels * TAPS * hw];
    for c in 0..channels {
        let plane = &src[c * hw..(c + 1) * hw];
        for tap in 0..TAPS {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let row = &mut col[(c * TAPS + tap) * hw..(c * TAPS + tap + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x0, x1) = shifted_range(w, dx);
                let s = sy as usize * w;
                let d = y * w;
                row[d + x0..d + x1].copy_from_slice(
                    &plane[(s as isize + x0 as isize + dx) as usize
                        ..(s as isize + x1 as isize + dx) as usize],
                );
            }
        }
    }
    col
}

/// Adjoint of `im2col`.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for tap in 0..TAPS {
            let (dy, dx) = (tap as isize / 3 - 1, tap as isize % 3 - 1);
            let row = &col[(c * TAPS + tap) * hw..(c * TAPS + tap + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x0, x1) = shifted_range(w, dx);
                let s = sy as usize * w;
                let d = y * w;
                let dst = &mut plane[(s as isize + x0 as isize + dx) as usize
                    ..(s as isize + x1 as isize + dx) as usize];
                for (a, b) in dst.iter_mut().zip(&row[d + x0..d + x1]) {
                    *a += b;
                }
            }
        }
    }
    out
}

/// Output columns whose source column `x + dx` lies inside `[0, w)`.
fn shifted_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)) as usize;
    (x0, x1.max(x0))
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, with
/// `op(a)` of size `m × k` and `op(b)` of size `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
