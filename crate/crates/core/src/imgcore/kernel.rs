use crate::error::{Error, Result};

/// A small convolution kernel with an explicit anchor tap.
///
/// Convolution with a kernel is defined as
/// `out[i, j] = Σ_{a,b} taps[a, b] · x[i - (a - anchor.0), j - (b - anchor.1)]`
/// so a single unit tap at the anchor is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    anchor: (usize, usize),
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, anchor: (usize, usize), taps: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("kernel", "kernel dimensions must be positive"));
        }
        if taps.len() != rows * cols {
            return Err(Error::invalid(
                "kernel",
                format!("{} taps do not fill a {rows}x{cols} kernel", taps.len()),
            ));
        }
        if anchor.0 >= rows || anchor.1 >= cols {
            return Err(Error::invalid(
                "kernel",
                format!("anchor {anchor:?} outside {rows}x{cols} support"),
            ));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("kernel", "non-finite tap"));
        }
        Ok(Self {
            rows,
            cols,
            anchor,
            taps,
        })
    }

    /// Kernel with the anchor at the (lower-right) center.
    pub fn centered(rows: usize, cols: usize, taps: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, (rows / 2, cols / 2), taps)
    }

    pub fn zeros(rows: usize, cols: usize, anchor: (usize, usize)) -> Self {
        Self::new(rows, cols, anchor, vec![0.0; rows * cols]).expect("valid zero kernel")
    }

    /// 1x1 identity kernel.
    pub fn delta() -> Self {
        Self::new(1, 1, (0, 0), vec![1.0]).expect("valid delta")
    }

    /// Unit tap at the anchor of a `rows x cols` support.
    pub fn delta_at(rows: usize, cols: usize, anchor: (usize, usize)) -> Result<Self> {
        let mut k = Self::new(rows, cols, anchor, vec![0.0; rows * cols])?;
        k.taps[anchor.0 * cols + anchor.1] = 1.0;
        Ok(k)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn anchor(&self) -> (usize, usize) {
        self.anchor
    }

    #[inline]
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize) -> f64 {
        self.taps[a * self.cols + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        self.taps[a * self.cols + b] = v;
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.taps.len() as f64
    }

    /// Same support and anchor, new taps.
    pub fn with_taps(&self, taps: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.anchor, taps)
    }

    /// Taps as `(row offset, col offset, value)` relative to the anchor.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        (0..self.rows).flat_map(move |a| {
            (0..self.cols).map(move |b| {
                (
                    a as isize - self.anchor.0 as isize,
                    b as isize - self.anchor.1 as isize,
                    self.at(a, b),
                )
            })
        })
    }

    /// Rotation by 180 degrees about the anchor: the kernel of the adjoint
    /// convolution.
    pub fn flipped(&self) -> Kernel {
        let taps = self.taps.iter().rev().copied().collect();
        Kernel {
            rows: self.rows,
            cols: self.cols,
            anchor: (self.rows - 1 - self.anchor.0, self.cols - 1 - self.anchor.1),
            taps,
        }
    }

    pub fn max_abs_diff(&self, other: &Kernel) -> f64 {
        self.taps
            .iter()
            .zip(&other.taps)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Blur kernel families used by the degradation models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurKind {
    /// Sampled isotropic Gaussian truncated to `width x width`.
    Gaussian { width: usize, sigma: f64 },
    /// Uniform over the pixels within `diameter / 2` of the center.
    Disk { diameter: usize },
    /// Uniform along a discretized segment; `angle` in radians,
    /// counter-clockwise from the horizontal axis.
    Motion { length: usize, angle: f64 },
}

/// Builds a normalized blur kernel (taps sum to one).
pub fn make_blur_kernel(kind: BlurKind) -> Result<Kernel> {
    match kind {
        BlurKind::Gaussian { width, sigma } => {
            if width == 0 {
                return Err(Error::invalid("width", "gaussian width must be positive"));
            }
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::invalid("sigma", "gaussian sigma must be positive"));
            }
            let c = (width as f64 - 1.0) / 2.0;
            let mut taps = Vec::with_capacity(width * width);
            for a in 0..width {
                for b in 0..width {
                    let y = a as f64 - c;
                    let x = b as f64 - c;
                    taps.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
                }
            }
            normalized(width, width, (width / 2, width / 2), taps)
        }
        BlurKind::Disk { diameter } => {
            if diameter == 0 {
                return Err(Error::invalid("diameter", "disk diameter must be positive"));
            }
            let c = (diameter as f64 - 1.0) / 2.0;
            let r2 = (diameter as f64 / 2.0).powi(2);
            let mut taps = Vec::with_capacity(diameter * diameter);
            for a in 0..diameter {
                for b in 0..diameter {
                    let y = a as f64 - c;
                    let x = b as f64 - c;
                    taps.push(if x * x + y * y <= r2 + 1e-12 { 1.0 } else { 0.0 });
                }
            }
            normalized(diameter, diameter, (diameter / 2, diameter / 2), taps)
        }
        BlurKind::Motion { length, angle } => {
            if length == 0 {
                return Err(Error::invalid("length", "motion length must be positive"));
            }
            if !angle.is_finite() {
                return Err(Error::invalid("angle", "motion angle must be finite"));
            }
            let (s, c) = angle.sin_cos();
            let half = (length as f64 - 1.0) / 2.0;
            let points: Vec<(isize, isize)> = (0..length)
                .map(|k| {
                    let t = k as f64 - half;
                    let row = (-t * s + 0.5).floor() as isize;
                    let col = (t * c + 0.5).floor() as isize;
                    (row, col)
                })
                .collect();
            let rmin = points.iter().map(|p| p.0).min().unwrap();
            let rmax = points.iter().map(|p| p.0).max().unwrap();
            let cmin = points.iter().map(|p| p.1).min().unwrap();
            let cmax = points.iter().map(|p| p.1).max().unwrap();
            let rows = (rmax - rmin + 1) as usize;
            let cols = (cmax - cmin + 1) as usize;
            let mut taps = vec![0.0; rows * cols];
            for (r, cc) in points {
                taps[(r - rmin) as usize * cols + (cc - cmin) as usize] += 1.0;
            }
            let anchor = (
                (-rmin).clamp(0, rows as isize - 1) as usize,
                (-cmin).clamp(0, cols as isize - 1) as usize,
            );
            normalized(rows, cols, anchor, taps)
        }
    }
}

fn normalized(rows: usize, cols: usize, anchor: (usize, usize), mut taps: Vec<f64>) -> Result<Kernel> {
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    Kernel::new(rows, cols, anchor, taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_normalized_and_rotation_symmetric() {
        let k = make_blur_kernel(BlurKind::Gaussian {
            width: 5,
            sigma: 1.0,
        })
        .unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        for a in 0..5 {
            for b in 0..5 {
                // 90 degree rotation: (a, b) -> (b, 4 - a)
                assert!((k.at(a, b) - k.at(b, 4 - a)).abs() < 1e-15);
            }
        }
        assert_eq!(k.anchor(), (2, 2));
    }

    #[test]
    fn unit_disk_is_delta() {
        let k = make_blur_kernel(BlurKind::Disk { diameter: 1 }).unwrap();
        assert_eq!(k, Kernel::delta());
    }

    #[test]
    fn disk_of_five() {
        let k = make_blur_kernel(BlurKind::Disk { diameter: 5 }).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        // corners excluded, edge midpoints included
        assert_eq!(k.at(0, 0), 0.0);
        assert!(k.at(0, 2) > 0.0);
        assert_eq!(k.taps().iter().filter(|&&t| t > 0.0).count(), 21);
    }

    #[test]
    fn horizontal_motion_is_uniform_row() {
        let k = make_blur_kernel(BlurKind::Motion {
            length: 5,
            angle: 0.0,
        })
        .unwrap();
        assert_eq!((k.rows(), k.cols()), (1, 5));
        assert_eq!(k.anchor(), (0, 2));
        for &t in k.taps() {
            assert!((t - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn vertical_and_diagonal_motion() {
        let v = make_blur_kernel(BlurKind::Motion {
            length: 3,
            angle: std::f64::consts::FRAC_PI_2,
        })
        .unwrap();
        assert_eq!((v.rows(), v.cols()), (3, 1));
        let d = make_blur_kernel(BlurKind::Motion {
            length: 4,
            angle: std::f64::consts::FRAC_PI_4,
        })
        .unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-12);
        assert!(d.anchor().0 < d.rows() && d.anchor().1 < d.cols());
    }

    #[test]
    fn nonpositive_sizes_rejected() {
        assert!(make_blur_kernel(BlurKind::Gaussian { width: 0, sigma: 1.0 }).is_err());
        assert!(make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.0 }).is_err());
        assert!(make_blur_kernel(BlurKind::Disk { diameter: 0 }).is_err());
        assert!(make_blur_kernel(BlurKind::Motion { length: 0, angle: 0.0 }).is_err());
    }

    #[test]
    fn flipped_twice_is_identity() {
        let k = Kernel::new(2, 3, (0, 1), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(k.flipped().flipped(), k);
        assert_eq!(k.flipped().anchor(), (1, 1));
    }
}
