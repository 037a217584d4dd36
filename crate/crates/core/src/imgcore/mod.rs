//! Shared numerical substrate: images, periodic operators, noise and PSNR.

mod conv;
mod degrade;
pub mod fft;
mod image;
mod kernel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{adjoint_convolve, adjoint_convolve_fft, periodic_convolve, periodic_convolve_fft};
pub(crate) use conv::{convolve_add, correlate_add, tap_gradient};
pub use degrade::{decimate, upsample_replicate, zero_fill, DegradationOp, TaskKind};
pub use image::Image;
pub use kernel::{make_blur_kernel, BlurKind, Kernel};

use crate::error::{Error, Result};

/// Discrete gradient `Du = (D^v u, D^h u)` with periodic forward differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub vertical: Image,
    pub horizontal: Image,
}

/// `(D^v u)[i, j] = u[i+1, j] - u[i, j]`, `(D^h u)[i, j] = u[i, j+1] - u[i, j]`,
/// indices taken modulo the image size.
pub fn grad_op(img: &Image) -> GradientField {
    let (h, w) = img.shape();
    let mut v = Image::zeros(h, w);
    let mut hz = Image::zeros(h, w);
    grad_into(img.as_slice(), h, w, v.as_mut_slice(), hz.as_mut_slice());
    GradientField {
        vertical: v,
        horizontal: hz,
    }
}

/// `D^T p`, the negative periodic divergence.
pub fn grad_adjoint(gf: &GradientField) -> Result<Image> {
    gf.vertical.check_same_shape(&gf.horizontal)?;
    let (h, w) = gf.vertical.shape();
    let mut out = Image::zeros(h, w);
    grad_adjoint_into(
        gf.vertical.as_slice(),
        gf.horizontal.as_slice(),
        h,
        w,
        out.as_mut_slice(),
    );
    Ok(out)
}

pub(crate) fn grad_into(u: &[f64], h: usize, w: usize, v: &mut [f64], hz: &mut [f64]) {
    for i in 0..h {
        let down = if i + 1 == h { 0 } else { i + 1 };
        for j in 0..w {
            let right = if j + 1 == w { 0 } else { j + 1 };
            let c = u[i * w + j];
            v[i * w + j] = u[down * w + j] - c;
            hz[i * w + j] = u[i * w + right] - c;
        }
    }
}

/// Overwrites `out` with `D^T (v, hz)`.
pub(crate) fn grad_adjoint_into(v: &[f64], hz: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        let up = if i == 0 { h - 1 } else { i - 1 };
        for j in 0..w {
            let left = if j == 0 { w - 1 } else { j - 1 };
            out[i * w + j] = v[up * w + j] - v[i * w + j] + hz[i * w + left] - hz[i * w + j];
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise, deterministic in `seed`.
pub fn add_awgn(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "noise level must be nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(img.map(|v| v + normal.sample(&mut rng)))
}

/// Peak signal-to-noise ratio in dB for unit peak; `+inf` when the images match.
pub fn psnr(u: &Image, g: &Image) -> Result<f64> {
    u.check_same_shape(g)?;
    let mse = u.sub(g).norm_sq() / u.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let gf = grad_op(&Image::filled(5, 4, 0.3));
        assert_eq!(gf.vertical.max_abs(), 0.0);
        assert_eq!(gf.horizontal.max_abs(), 0.0);
    }

    #[test]
    fn horizontal_difference_wraps() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let gf = grad_op(&img);
        assert_eq!(gf.horizontal.as_slice(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(gf.vertical.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn gradient_adjoint_identity() {
        let u = random(1, 6, 6);
        let p = GradientField {
            vertical: random(2, 6, 6),
            horizontal: random(3, 6, 6),
        };
        let du = grad_op(&u);
        let lhs = du.vertical.dot(&p.vertical) + du.horizontal.dot(&p.horizontal);
        let rhs = u.dot(&grad_adjoint(&p).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn awgn_zero_sigma_and_determinism() {
        let img = random(4, 8, 8);
        assert_eq!(add_awgn(&img, 0.0, 9).unwrap(), img);
        assert_eq!(add_awgn(&img, 0.1, 9).unwrap(), add_awgn(&img, 0.1, 9).unwrap());
        assert_ne!(add_awgn(&img, 0.1, 9).unwrap(), add_awgn(&img, 0.1, 10).unwrap());
        assert!(add_awgn(&img, -1.0, 0).is_err());
    }

    #[test]
    fn awgn_sample_std() {
        // n = 65536 samples: the std of the sample std is about sigma / sqrt(2n),
        // so [0.009, 0.011] is far outside a 3-sigma band.
        let noisy = add_awgn(&Image::zeros(256, 256), 0.01, 42).unwrap();
        let mean = noisy.mean();
        let var = noisy.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (noisy.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.009..=0.011).contains(&std), "sample std {std}");
    }

    #[test]
    fn psnr_values() {
        let g = Image::zeros(4, 4);
        assert_eq!(psnr(&g, &g).unwrap(), f64::INFINITY);
        let u = Image::filled(4, 4, 0.1);
        assert!((psnr(&u, &g).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&Image::zeros(2, 2), &g).is_err());
    }
}
