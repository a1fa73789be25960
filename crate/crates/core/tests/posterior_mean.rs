//! Every sampler, run with an exact Gaussian prior and a noiseless
//! superresolution measurement, should average to the closed-form posterior
//! mean.

mod common;

use padis::assemble::{Assembler, AssemblyMode, Prior};
use padis::grid::CanvasLayout;
use padis::operators::{Downsample, LinearOperator};
use padis::samplers::{reconstruct, Problem, SamplerConfig, SamplerKind};
use padis::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn samplers_recover_the_gaussian_posterior_mean() {
    let layout = CanvasLayout::new(16, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let prior = common::framed_gaussian(&layout, &mut rng);
    let truth = layout.crop_center(&prior.sample(&mut rng)).unwrap();
    let op = Downsample::new(truth.shape(), 4).unwrap();
    let y = op.apply(&truth).unwrap();

    let mu = layout.crop_center(prior.mean()).unwrap();
    let var = layout.crop_center(prior.variance()).unwrap();
    let post = common::gaussian_posterior_mean(mu.data(), var.data(), &common::dense(&op), y.data(), 0.0);

    let asm = Assembler::new(layout, AssemblyMode::PadisStochastic).unwrap();
    let bound = Prior::new(asm, &prior);
    let problem = Problem { op: &op, y: &y, truth: Some(&truth) };
    for kind in SamplerKind::ALL {
        let runs: Vec<Image> = (0..20)
            .map(|seed| {
                let cfg = SamplerConfig::new(200, 0.01, 10.0, seed);
                reconstruct(kind, &bound, &problem, &cfg).unwrap().image
            })
            .collect();
        let n = runs.len() as f64;
        let mut z2 = 0.0;
        for p in 0..post.len() {
            let vals: Vec<f64> = runs.iter().map(|r| r.data()[p]).collect();
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let se = sd / n.sqrt();
            z2 += ((m - post[p]) / se).powi(2);
        }
        let rms_z = (z2 / post.len() as f64).sqrt();
        println!("{}: rms z = {rms_z:.3}", kind.name());
        assert!(rms_z < 3.0, "{}: rms z {rms_z}", kind.name());
    }
}
