//! Proximal map of `τ · ½‖A · − g‖²` via the DFT.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::imgcore::fft::Fft2;
use crate::imgcore::{DegradationOp, Image};

enum Solver {
    Identity,
    /// Real multiplier `1 / (τ|Ĥ|² + 1)` per frequency.
    Blur { fft: Fft2, inv_den: Vec<f64> },
    /// Polyphase Woodbury solve for `τ HᵀSᵀSH + I`.
    Decimated {
        fft: Fft2,
        spec: Vec<Complex64>,
        /// `1 / (1 + τ/d² Σ_alias |Ĥ|²)` per alias class.
        inv_den: Vec<f64>,
        factor: usize,
    },
}

/// Solver for `(τ AᵀA + I) x = b`, set up once for an operator, step and shape.
pub struct DataProx {
    tau: f64,
    shape: (usize, usize),
    solver: Solver,
}

impl std::fmt::Debug for DataProx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataProx")
            .field("tau", &self.tau)
            .field("shape", &self.shape)
            .finish()
    }
}

impl DataProx {
    pub fn new(op: &DegradationOp, tau: f64, shape: (usize, usize)) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::invalid("tau", "prox step must be nonnegative"));
        }
        op.output_shape(shape)?;
        let (h, w) = shape;
        let solver = match op {
            DegradationOp::Identity => Solver::Identity,
            DegradationOp::Blur(k) => {
                check_fits(k.rows(), k.cols(), shape)?;
                let fft = Fft2::new(h, w);
                let inv_den = fft
                    .kernel_spectrum(k)
                    .iter()
                    .map(|z| 1.0 / (tau * z.norm_sqr() + 1.0))
                    .collect();
                Solver::Blur { fft, inv_den }
            }
            DegradationOp::DecimatedBlur { kernel, factor } => {
                check_fits(kernel.rows(), kernel.cols(), shape)?;
                let d = *factor;
                let fft = Fft2::new(h, w);
                let spec = fft.kernel_spectrum(kernel);
                let (hh, ww) = (h / d, w / d);
                let mut den = vec![0.0; hh * ww];
                for i in 0..h {
                    for j in 0..w {
                        den[(i % hh) * ww + j % ww] += spec[i * w + j].norm_sqr();
                    }
                }
                let c = tau / (d * d) as f64;
                let inv_den = den.into_iter().map(|s| 1.0 / (1.0 + c * s)).collect();
                Solver::Decimated {
                    fft,
                    spec,
                    inv_den,
                    factor: d,
                }
            }
        };
        Ok(Self { tau, shape, solver })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Overwrites `buf` (an image-space array) with `(τ AᵀA + I)⁻¹ buf`.
    pub fn solve_in_place(&self, buf: &mut [f64]) {
        let (h, w) = self.shape;
        match &self.solver {
            Solver::Identity => {
                let s = 1.0 / (self.tau + 1.0);
                buf.iter_mut().for_each(|x| *x *= s);
            }
            Solver::Blur { fft, inv_den } => {
                let mut z: Vec<Complex64> = buf.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                fft.forward(&mut z);
                z.iter_mut().zip(inv_den).for_each(|(z, s)| *z *= s);
                fft.inverse(&mut z);
                buf.iter_mut().zip(&z).for_each(|(x, z)| *x = z.re);
            }
            Solver::Decimated {
                fft,
                spec,
                inv_den,
                factor,
            } => {
                let d = *factor;
                let (hh, ww) = (h / d, w / d);
                let mut z: Vec<Complex64> = buf.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                fft.forward(&mut z);
                // alias-class sums of Ĥ r̂
                let mut acc = vec![Complex64::new(0.0, 0.0); hh * ww];
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        acc[(i % hh) * ww + j % ww] += spec[k] * z[k];
                    }
                }
                acc.iter_mut().zip(inv_den).for_each(|(a, s)| *a *= s);
                let c = self.tau / (d * d) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        z[k] -= c * spec[k].conj() * acc[(i % hh) * ww + j % ww];
                    }
                }
                fft.inverse(&mut z);
                buf.iter_mut().zip(&z).for_each(|(x, z)| *x = z.re);
            }
        }
    }

    pub fn solve(&self, rhs: &Image) -> Result<Image> {
        if rhs.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: rhs.shape(),
            });
        }
        let mut out = rhs.clone();
        self.solve_in_place(out.as_mut_slice());
        Ok(out)
    }
}

fn check_fits(rows: usize, cols: usize, shape: (usize, usize)) -> Result<()> {
    if rows > shape.0 || cols > shape.1 {
        return Err(Error::KernelTooLarge {
            kernel: (rows, cols),
            image: shape,
        });
    }
    Ok(())
}

/// `argmin_u ½‖u − ū‖² + τ/2 ‖Au − g‖²`, i.e. the solution of
/// `(τ AᵀA + I) u = τ Aᵀ g + ū`.
pub fn prox_data(op: &DegradationOp, g: &Image, tau: f64, u_bar: &Image) -> Result<Image> {
    let expected = op.output_shape(u_bar.shape())?;
    if g.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: g.shape(),
        });
    }
    let prox = DataProx::new(op, tau, u_bar.shape())?;
    let mut rhs = op.apply_adjoint(g)?.scale(tau);
    rhs.axpy(1.0, u_bar);
    prox.solve(&rhs)
}

/// Jacobian of [`prox_data`] in `ū` applied to `w`; the map is affine so
/// this is `(τ AᵀA + I)⁻¹ w`.
pub fn prox_data_jacobian_apply(op: &DegradationOp, tau: f64, w: &Image) -> Result<Image> {
    DataProx::new(op, tau, w.shape())?.solve(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foe::tests::random_image;
    use crate::imgcore::{make_blur_kernel, BlurKind, Kernel};

    /// Dense `τ AᵀA + I` assembled column by column, then solved.
    fn dense_prox(op: &DegradationOp, g: &Image, tau: f64, u_bar: &Image) -> Image {
        let (h, w) = u_bar.shape();
        let n = h * w;
        let mut a = vec![vec![0.0; n]; n];
        for c in 0..n {
            let mut e = Image::zeros(h, w);
            e.as_mut_slice()[c] = 1.0;
            let col = op.normal_apply(&e).unwrap();
            for r in 0..n {
                a[r][c] = tau * col.as_slice()[r] + if r == c { 1.0 } else { 0.0 };
            }
        }
        let mut b = op.apply_adjoint(g).unwrap().scale(tau);
        b.axpy(1.0, u_bar);
        let x = crate::foe::lower::tests::dense_solve(a, b.into_vec());
        Image::new(h, w, x).unwrap()
    }

    fn ops() -> Vec<DegradationOp> {
        let k = make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.8 }).unwrap();
        let asym = Kernel::new(2, 3, (0, 1), vec![0.1, 0.4, 0.05, 0.2, 0.15, 0.1]).unwrap();
        vec![
            DegradationOp::Identity,
            DegradationOp::Blur(k.clone()),
            DegradationOp::Blur(asym.clone()),
            DegradationOp::decimated(k, 2).unwrap(),
            DegradationOp::decimated(asym, 2).unwrap(),
            DegradationOp::decimated(Kernel::delta(), 4).unwrap(),
        ]
    }

    #[test]
    fn matches_dense_solve() {
        for (t, op) in ops().iter().enumerate() {
            let u_bar = random_image(40 + t as u64, 8, 8, 1.0);
            let g_shape = op.output_shape((8, 8)).unwrap();
            let g = random_image(60 + t as u64, g_shape.0, g_shape.1, 1.0);
            for tau in [0.0, 0.3, 2.5] {
                let fast = prox_data(op, &g, tau, &u_bar).unwrap();
                let dense = dense_prox(op, &g, tau, &u_bar);
                assert!(fast.sub(&dense).max_abs() < 1e-10, "op {t}, tau {tau}");
                // optimality residual
                let mut lhs = op.normal_apply(&fast).unwrap().scale(tau);
                lhs.axpy(1.0, &fast);
                let mut rhs = op.apply_adjoint(&g).unwrap().scale(tau);
                rhs.axpy(1.0, &u_bar);
                assert!(lhs.sub(&rhs).max_abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trivial_cases() {
        let u_bar = random_image(1, 6, 6, 1.0);
        let g = random_image(2, 6, 6, 1.0);
        let op = ops()[1].clone();
        assert!(prox_data(&op, &g, 0.0, &u_bar).unwrap().sub(&u_bar).max_abs() < 1e-14);
        let half = prox_data(&DegradationOp::Identity, &g, 1.0, &u_bar).unwrap();
        assert!(half.sub(&g.add(&u_bar).scale(0.5)).max_abs() < 1e-15);
        let w = random_image(3, 6, 6, 1.0);
        assert!(prox_data_jacobian_apply(&op, 0.0, &w).unwrap().sub(&w).max_abs() < 1e-14);
        assert!(prox_data_jacobian_apply(&DegradationOp::Identity, 1.0, &w).unwrap().sub(&w.scale(0.5)).max_abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_difference_quotient() {
        // the prox is affine, so a unit difference quotient is exact up to rounding
        for (t, op) in ops().iter().enumerate() {
            let u_bar = random_image(70 + t as u64, 8, 8, 1.0);
            let g_shape = op.output_shape((8, 8)).unwrap();
            let g = random_image(80 + t as u64, g_shape.0, g_shape.1, 1.0);
            let w = random_image(90 + t as u64, 8, 8, 1.0);
            let jw = prox_data_jacobian_apply(op, 0.7, &w).unwrap();
            let fd = prox_data(op, &g, 0.7, &u_bar.add(&w)).unwrap().sub(&prox_data(op, &g, 0.7, &u_bar).unwrap());
            assert!(jw.sub(&fd).max_abs() < 1e-8);
        }
    }

    #[test]
    fn prox_is_nonexpansive() {
        for (t, op) in ops().iter().enumerate() {
            let g_shape = op.output_shape((8, 8)).unwrap();
            let g = random_image(100 + t as u64, g_shape.0, g_shape.1, 1.0);
            for s in 0..5u64 {
                let a = random_image(200 + 10 * s + t as u64, 8, 8, 1.0);
                let b = random_image(300 + 10 * s + t as u64, 8, 8, 1.0);
                let pa = prox_data(op, &g, 1.3, &a).unwrap();
                let pb = prox_data(op, &g, 1.3, &b).unwrap();
                assert!(pa.sub(&pb).norm() <= a.sub(&b).norm() + 1e-12);
            }
        }
    }
}
