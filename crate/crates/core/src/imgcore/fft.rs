//! Two-dimensional FFT on row-major buffers, built from `rustfft` 1-D plans.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Image, Kernel};

/// Cached forward/inverse plans for one image shape.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform including the `1 / (height * width)` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_inv, &self.col_inv);
        let s = 1.0 / (self.height * self.width) as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward_real(&self, img: &Image) -> Vec<Complex64> {
        debug_assert_eq!(img.shape(), self.shape());
        let mut buf: Vec<Complex64> = img
            .as_slice()
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut buf: Vec<Complex64>) -> Image {
        self.inverse(&mut buf);
        let data = buf.into_iter().map(|z| z.re).collect();
        Image::new(self.height, self.width, data).expect("finite inverse transform")
    }

    /// Spectrum of the periodic convolution operator defined by `kernel`.
    pub fn kernel_spectrum(&self, kernel: &Kernel) -> Vec<Complex64> {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.height * self.width];
        for (dr, dc, t) in kernel.offsets() {
            let r = dr.rem_euclid(h) as usize;
            let c = dc.rem_euclid(w) as usize;
            buf[r * self.width + c].re += t;
        }
        self.forward(&mut buf);
        buf
    }

    fn transform(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        row.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        transpose(buf, &mut t, h, w);
        col.process(&mut t);
        transpose(&t, buf, w, h);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let img = Image::from_fn(6, 10, |i, j| ((i * 31 + j * 17) % 7) as f64 - 3.0);
        let fft = Fft2::new(6, 10);
        let back = fft.inverse_real(fft.forward_real(&img));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_component_is_sum() {
        let img = Image::from_fn(4, 5, |i, j| (i + j) as f64);
        let spec = Fft2::new(4, 5).forward_real(&img);
        assert!((spec[0].re - img.sum()).abs() < 1e-12);
    }
}
