//! Periodic (circular) convolution and its adjoint.

use num_complex::Complex64;

use super::fft::Fft2;
use super::{Image, Kernel};
use crate::error::{Error, Result};

fn check_fits(img: &Image, ker: &Kernel) -> Result<()> {
    if ker.rows() > img.height() || ker.cols() > img.width() {
        return Err(Error::KernelTooLarge {
            kernel: (ker.rows(), ker.cols()),
            image: img.shape(),
        });
    }
    Ok(())
}

/// `out[i, j] += k * x[(i + di) mod h, (j + dj) mod w]`
#[inline]
pub(crate) fn shifted_axpy(x: &[f64], h: usize, w: usize, di: isize, dj: isize, k: f64, out: &mut [f64]) {
    if k == 0.0 {
        return;
    }
    let dj = dj.rem_euclid(w as isize) as usize;
    for i in 0..h {
        let si = (i as isize + di).rem_euclid(h as isize) as usize;
        let src = &x[si * w..(si + 1) * w];
        let dst = &mut out[i * w..(i + 1) * w];
        // columns j with j + dj < w map directly, the rest wrap around
        let split = w - dj;
        for (d, s) in dst[..split].iter_mut().zip(&src[dj..]) {
            *d += k * s;
        }
        for (d, s) in dst[split..].iter_mut().zip(&src[..dj]) {
            *d += k * s;
        }
    }
}

/// Accumulates `ker * x` into `out` (flat buffers of an `h x w` grid).
pub(crate) fn convolve_add(x: &[f64], h: usize, w: usize, ker: &Kernel, out: &mut [f64]) {
    for (dr, dc, t) in ker.offsets() {
        shifted_axpy(x, h, w, -dr, -dc, t, out);
    }
}

/// Accumulates `ker^T * x` (periodic cross-correlation) into `out`.
pub(crate) fn correlate_add(x: &[f64], h: usize, w: usize, ker: &Kernel, out: &mut [f64]) {
    for (dr, dc, t) in ker.offsets() {
        shifted_axpy(x, h, w, dr, dc, t, out);
    }
}

/// Periodic cross-correlation of `x` with `y` evaluated on the taps of a
/// kernel support: `grad[a, b] = Σ_i y[i] · x[i - (a - anchor)]`.
///
/// This is the derivative of `⟨ker * x, y⟩` with respect to the taps of `ker`.
pub(crate) fn tap_gradient(x: &[f64], y: &[f64], h: usize, w: usize, support: &Kernel) -> Vec<f64> {
    let mut grad = Vec::with_capacity(support.len());
    for (dr, dc, _) in support.offsets() {
        let dj = (-dc).rem_euclid(w as isize) as usize;
        let mut acc = 0.0;
        for i in 0..h {
            let si = (i as isize - dr).rem_euclid(h as isize) as usize;
            let src = &x[si * w..(si + 1) * w];
            let yr = &y[i * w..(i + 1) * w];
            let split = w - dj;
            for (a, b) in yr[..split].iter().zip(&src[dj..]) {
                acc += a * b;
            }
            for (a, b) in yr[split..].iter().zip(&src[..dj]) {
                acc += a * b;
            }
        }
        grad.push(acc);
    }
    grad
}

/// Circular convolution, direct spatial evaluation.
pub fn periodic_convolve(img: &Image, ker: &Kernel) -> Result<Image> {
    check_fits(img, ker)?;
    let (h, w) = img.shape();
    let mut out = Image::zeros(h, w);
    convolve_add(img.as_slice(), h, w, ker, out.as_mut_slice());
    Ok(out)
}

/// Exact adjoint of [`periodic_convolve`] under the Euclidean inner product.
pub fn adjoint_convolve(img: &Image, ker: &Kernel) -> Result<Image> {
    check_fits(img, ker)?;
    let (h, w) = img.shape();
    let mut out = Image::zeros(h, w);
    correlate_add(img.as_slice(), h, w, ker, out.as_mut_slice());
    Ok(out)
}

/// Circular convolution evaluated through the FFT.
pub fn periodic_convolve_fft(img: &Image, ker: &Kernel) -> Result<Image> {
    check_fits(img, ker)?;
    let fft = Fft2::new(img.height(), img.width());
    let spec = fft.kernel_spectrum(ker);
    let mut buf = fft.forward_real(img);
    buf.iter_mut().zip(&spec).for_each(|(x, k)| *x *= k);
    Ok(fft.inverse_real(buf))
}

/// Adjoint convolution through the FFT (multiplication by the conjugate spectrum).
pub fn adjoint_convolve_fft(img: &Image, ker: &Kernel) -> Result<Image> {
    check_fits(img, ker)?;
    let fft = Fft2::new(img.height(), img.width());
    let spec = fft.kernel_spectrum(ker);
    let mut buf = fft.forward_real(img);
    buf.iter_mut()
        .zip(&spec)
        .for_each(|(x, k): (&mut Complex64, &Complex64)| *x *= k.conj());
    Ok(fft.inverse_real(buf))
}
