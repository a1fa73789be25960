"""Writes the metric fixture pairs and their reference scores.

Reference values come from scikit-image (peak_signal_noise_ratio and
structural_similarity with a Gaussian window of sigma 1.5, population
covariance, data range 1) evaluated on the 8-bit images read back as q/255.
"""
import pathlib

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

HERE = pathlib.Path(__file__).parent


def write_pgm(path, img):
    h, w = img.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def pairs(rng):
    yy, xx = np.mgrid[0:40, 0:48]
    smooth = 128 + 90 * np.sin(xx / 6.0) * np.cos(yy / 9.0)
    yield "smooth_noise", smooth, smooth + rng.normal(0, 12, smooth.shape)
    disk = np.where((xx - 24) ** 2 + (yy - 20) ** 2 < 144, 200.0, 40.0)
    yield "disk_blur", disk, (disk + np.roll(disk, 1, 0) + np.roll(disk, 1, 1) + np.roll(disk, -1, 1)) / 4
    ramp = np.tile(np.linspace(0, 255, 48), (40, 1))
    yield "ramp_offset", ramp, ramp * 0.8 + 20
    texture = rng.uniform(0, 255, (32, 32))
    yield "texture_shuffle", texture, rng.permutation(texture.ravel()).reshape(32, 32)
    checker = ((np.mgrid[0:24, 0:30].sum(0) // 3) % 2) * 255.0
    yield "checker_invert", checker, 255.0 - checker * 0.9


def main():
    rng = np.random.default_rng(7)
    rows = ["name,psnr,ssim"]
    for name, a, b in pairs(rng):
        a = np.clip(np.rint(a), 0, 255)
        b = np.clip(np.rint(b), 0, 255)
        write_pgm(HERE / f"{name}_a.pgm", a)
        write_pgm(HERE / f"{name}_b.pgm", b)
        fa, fb = a / 255.0, b / 255.0
        p = peak_signal_noise_ratio(fb, fa, data_range=1.0)
        s = structural_similarity(
            fa, fb, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        rows.append(f"{name},{p:.10f},{s:.10f}")
    (HERE / "reference.csv").write_text("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
