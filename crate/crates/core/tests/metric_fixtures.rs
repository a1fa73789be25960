//! PSNR and SSIM against reference scores computed by scikit-image
//! (see `fixtures/metrics/generate.py`).

use std::path::PathBuf;

use padis::metrics::{psnr, ssim};
use padis::pnm;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics")
}

#[test]
fn metrics_match_reference_scores() {
    let table = std::fs::read_to_string(fixture_dir().join("reference.csv")).unwrap();
    let mut checked = 0;
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let a = pnm::read(fixture_dir().join(format!("{}_a.pgm", f[0]))).unwrap();
        let b = pnm::read(fixture_dir().join(format!("{}_b.pgm", f[0]))).unwrap();
        let want_psnr: f64 = f[1].parse().unwrap();
        let want_ssim: f64 = f[2].parse().unwrap();
        let got_psnr = psnr(&b, &a, 1.0).unwrap();
        let got_ssim = ssim(&a, &b).unwrap();
        assert!((got_psnr - want_psnr).abs() < 1e-4, "{}: psnr {got_psnr} vs {want_psnr}", f[0]);
        assert!((got_ssim - want_ssim).abs() < 1e-4, "{}: ssim {got_ssim} vs {want_ssim}", f[0]);
        checked += 1;
    }
    assert_eq!(checked, 5);
}
