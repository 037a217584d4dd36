use crate::error::{Error, Result};

/// Grayscale image stored row-major in 64-bit floats.
///
/// Values nominally live in `[0, 1]` but are never clipped while optimizing;
/// clipping only happens when exporting to an integer file format.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("shape", "image dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(
                "data",
                format!(
                    "{} values do not fill a {height}x{width} image",
                    data.len()
                ),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "data",
                format!("non-finite value at flat index {pos}"),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    /// Value at `(i, j)` with periodic wrap-around in both directions.
    #[inline]
    pub fn get_wrapped(&self, i: isize, j: isize) -> f64 {
        let r = i.rem_euclid(self.height as isize) as usize;
        let c = j.rem_euclid(self.width as isize) as usize;
        self.data[r * self.width + c]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Image {
        debug_assert_eq!(self.shape(), other.shape());
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Image) {
        debug_assert_eq!(self.shape(), x.shape());
        for (y, &xv) in self.data.iter_mut().zip(&x.data) {
            *y += a * xv;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn clipped(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the `rows x cols` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Image> {
        if rows == 0 || cols == 0 || top + rows > self.height || left + cols > self.width {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {rows}x{cols} at ({top}, {left}) exceeds {}x{} image",
                    self.height, self.width
                ),
            ));
        }
        Ok(Image::from_fn(rows, cols, |i, j| self.get(top + i, left + j)))
    }

    /// Symmetric ("reflexive") padding by `pad` pixels on every side.
    ///
    /// Uses half-sample symmetry: `x[-1] = x[0]`, `x[-2] = x[1]`, ...
    pub fn pad_reflect(&self, pad: usize) -> Image {
        let reflect = |k: isize, n: usize| -> usize {
            let n = n as isize;
            let period = 2 * n;
            let m = k.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        };
        let h = self.height + 2 * pad;
        let w = self.width + 2 * pad;
        Image::from_fn(h, w, |i, j| {
            let r = reflect(i as isize - pad as isize, self.height);
            let c = reflect(j as isize - pad as isize, self.width);
            self.get(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_nans() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
        assert!(Image::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn wrapped_access() {
        let img = Image::from_fn(3, 4, |i, j| (10 * i + j) as f64);
        assert_eq!(img.get_wrapped(-1, 0), 20.0);
        assert_eq!(img.get_wrapped(3, 5), 1.0);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let img = Image::from_fn(4, 5, |i, j| (i * 7 + j * 3) as f64);
        let padded = img.pad_reflect(3);
        assert_eq!(padded.shape(), (10, 11));
        assert_eq!(padded.crop(3, 3, 4, 5).unwrap(), img);
        // half-sample symmetry at the top-left corner
        assert_eq!(padded.get(2, 3), img.get(0, 0));
        assert_eq!(padded.get(1, 3), img.get(1, 0));
    }
}
