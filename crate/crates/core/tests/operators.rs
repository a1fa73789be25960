//! Adjointness, explicit transposes, pseudo-inverses and the projector footprint.

mod common;

use padis::operators::{
    ddnm_project, self_check, BoxBlur, CgPinv, CtGeometry, Downsample, LinearOperator, Radon,
};
use padis::{Image, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(shape: Shape, rng: &mut impl Rng) -> Image {
    Image::from_fn(shape, |_, _, _| rng.sample::<f64, _>(StandardNormal))
}

fn adjoint_gap(op: &dyn LinearOperator, rng: &mut impl Rng) -> f64 {
    let x = gaussian(op.input_shape(), rng);
    let y = gaussian(op.output_shape(), rng);
    let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
    let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

fn operators(n: usize) -> Vec<Box<dyn LinearOperator>> {
    vec![
        Box::new(Radon::new(n, CtGeometry::new(20, (n as f64 * 1.5) as usize, 1.0).unwrap()).unwrap()),
        Box::new(Radon::new(n, CtGeometry::new(7, n * 2, 0.75).unwrap()).unwrap()),
        Box::new(BoxBlur::new(Shape::square(n, 1), 9).unwrap()),
        Box::new(BoxBlur::new(Shape::square(n, 3), 3).unwrap()),
        Box::new(Downsample::new(Shape::square(n, 1), 4).unwrap()),
        Box::new(Downsample::new(Shape::square(n, 3), 2).unwrap()),
    ]
}

#[test]
fn dot_product_test_over_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for op in operators(32) {
        let worst = (0..100).map(|_| adjoint_gap(op.as_ref(), &mut rng)).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{}: {worst}", op.name());
        self_check(op.as_ref(), &mut rng, 5).unwrap();
    }
}

#[test]
fn explicit_transpose_at_sixteen_pixels() {
    for op in operators(16) {
        let a = common::dense(op.as_ref());
        let (ins, outs) = (op.input_shape(), op.output_shape());
        let mut worst: f64 = 0.0;
        for i in 0..outs.len() {
            let mut e = Image::zeros(outs);
            e.data_mut()[i] = 1.0;
            let row = op.adjoint(&e).unwrap();
            for j in 0..ins.len() {
                worst = worst.max((row.data()[j] - a[(i, j)]).abs());
            }
        }
        assert!(worst < 1e-10, "{}: {worst}", op.name());
    }
}

#[test]
fn impulse_footprint_is_the_interpolation_tent() {
    let n = 15;
    let geom = CtGeometry::new(13, 45, 0.5).unwrap();
    let radon = Radon::new(n, geom).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    for &(row, col) in &[(7, 7), (2, 11), (13, 0), (5, 9)] {
        let mut img = Image::zeros(Shape::square(n, 1));
        img.set(0, row, col, 1.0);
        let sino = radon.apply(&img).unwrap();
        let (px, py) = (col as f64 - c, c - row as f64);
        for v in 0..13 {
            let th = geom.angle(v);
            let (cs, sn) = (th.cos(), th.sin());
            let a = cs.abs().max(sn.abs());
            for d in 0..45 {
                let t = geom.offset(d);
                let expected = (1.0 - (t - (px * cs + py * sn)).abs() / a).max(0.0) / a;
                let got = sino.at(0, v, d);
                assert!((got - expected).abs() < 1e-12, "pixel ({row},{col}) view {v} bin {d}: {got} vs {expected}");
            }
        }
    }
}

#[test]
fn downsampling_pinv_is_a_generalized_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for f in [2, 4] {
        let op = Downsample::new(Shape::square(16, 1), f).unwrap();
        let x = gaussian(op.input_shape(), &mut rng);
        let ax = op.apply(&x).unwrap();
        let back = op.apply(&op.pinv(&ax).unwrap()).unwrap();
        assert!(back.max_abs_diff(&ax).unwrap() < 1e-12);
    }
}

fn disk_phantom(n: usize) -> Image {
    let c = (n as f64 - 1.0) / 2.0;
    Image::from_fn(Shape::square(n, 1), |_, r, q| {
        let (dx, dy) = (q as f64 - c, r as f64 - c);
        let mut v = 0.0;
        if dx * dx + dy * dy < (0.4 * n as f64).powi(2) {
            v += 0.6;
        }
        if (dx - 5.0).powi(2) / 16.0 + (dy + 3.0).powi(2) / 64.0 < 1.0 {
            v += 0.3;
        }
        v
    })
}

#[test]
fn ct_projection_with_cg_pinv_is_data_consistent() {
    let n = 64;
    let op = CgPinv::new(Radon::new(n, CtGeometry::desk(20).unwrap()).unwrap(), 20);
    let y = op.apply(&disk_phantom(n)).unwrap();
    let d = Image::filled(Shape::square(n, 1), 0.3);
    let x = ddnm_project(&d, &y, &op).unwrap();
    let rel = op.apply(&x).unwrap().sub(&y).unwrap().norm() / y.norm();
    assert!(rel < 1e-2, "relative residual {rel}");
}
