//! Field-of-Experts bilevel learning.
//!
//! The lower-level energy is
//! `J(u) = ½‖A u − f‖² + Σ_ℓ α_ℓ Σ_i φ((k_ℓ ∗ u)_i)` with `φ(x) = log(1 + x²)`.
//! Training adjusts the weights `α ≥ 0` and zero-mean filters `k_ℓ` so that
//! the minimizers of `J` approach the ground truth in the squared error.

mod adjoint;
pub(crate) mod lower;
mod train;

pub use adjoint::{grad_alpha, grad_kernel, solve_adjoint_cg, CgConfig, CgSolution, HessianOperator};
pub use lower::{bb1_step, solve_lower, LowerSolution, LowerSolveConfig};
pub use train::{restore_foe, train_foe, FoeTrainConfig, FoeTrainer, TrainStateFoE, TrainedFoE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgcore::{convolve_add, correlate_add, DegradationOp, Image, Kernel};

#[inline]
pub fn phi(x: f64) -> f64 {
    x.mul_add(x, 1.0).ln()
}

#[inline]
pub fn phi_prime(x: f64) -> f64 {
    2.0 * x / x.mul_add(x, 1.0)
}

#[inline]
pub fn phi_second(x: f64) -> f64 {
    let d = x.mul_add(x, 1.0);
    2.0 * (1.0 - x * x) / (d * d)
}

/// Weights and filters of the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FoEParams {
    pub alphas: Vec<f64>,
    pub kernels: Vec<Kernel>,
}

impl FoEParams {
    pub fn new(alphas: Vec<f64>, kernels: Vec<Kernel>) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != kernels.len() {
            return Err(Error::invalid(
                "params",
                format!("{} weights for {} filters", alphas.len(), kernels.len()),
            ));
        }
        let kappa = kernels[0].rows();
        for k in &kernels {
            if k.rows() != kappa || k.cols() != kappa {
                return Err(Error::invalid("params", "filters must all be kappa x kappa"));
            }
            if k.anchor() != (kappa / 2, kappa / 2) {
                return Err(Error::invalid("params", "filters must be anchored at the center"));
            }
        }
        if alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("params", "non-finite weight"));
        }
        Ok(Self { alphas, kernels })
    }

    pub fn num_filters(&self) -> usize {
        self.alphas.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels[0].rows()
    }

    /// Nonnegative weights and zero-mean filters (to `tol`).
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.alphas.iter().all(|&a| a >= 0.0) && self.kernels.iter().all(|k| k.sum().abs() <= tol)
    }

    /// Seeded i.i.d. `N(0, 0.01)` taps, mean-subtracted, all weights `alpha`.
    pub fn random_init(num_filters: usize, kappa: usize, alpha: f64, seed: u64) -> Result<Self> {
        if num_filters == 0 || kappa == 0 {
            return Err(Error::invalid("L", "need at least one nonempty filter"));
        }
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..num_filters)
            .map(|_| Kernel::centered(kappa, kappa, (0..kappa * kappa).map(|_| normal.sample(&mut rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        project_params(&FoEParams::new(vec![alpha; num_filters], kernels)?)
    }

    /// Alternative starting point: the lowest-frequency non-constant 2-D DCT
    /// atoms (which are zero-mean), scaled by `scale`, plus a seeded
    /// perturbation of relative size `jitter`, all with weight `alpha`.
    pub fn dct_init(num_filters: usize, kappa: usize, alpha: f64, scale: f64, jitter: f64, seed: u64) -> Result<Self> {
        if kappa < 2 {
            return Err(Error::invalid("kappa", "filters need at least 2x2 support"));
        }
        if num_filters == 0 || num_filters > kappa * kappa - 1 {
            return Err(Error::invalid(
                "L",
                format!("between 1 and {} filters fit a {kappa}x{kappa} support", kappa * kappa - 1),
            ));
        }
        let mut freqs: Vec<(usize, usize)> = (0..kappa)
            .flat_map(|a| (0..kappa).map(move |b| (a, b)))
            .filter(|&f| f != (0, 0))
            .collect();
        freqs.sort_by_key(|&(a, b)| (a + b, a.max(b), a));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = kappa as f64;
        let kernels = freqs[..num_filters]
            .iter()
            .map(|&(fa, fb)| {
                let mut taps = Vec::with_capacity(kappa * kappa);
                for a in 0..kappa {
                    for b in 0..kappa {
                        let ca = (std::f64::consts::PI * (a as f64 + 0.5) * fa as f64 / n).cos();
                        let cb = (std::f64::consts::PI * (b as f64 + 0.5) * fb as f64 / n).cos();
                        taps.push(ca * cb);
                    }
                }
                let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
                let taps = taps
                    .into_iter()
                    .map(|t| scale * (t / norm + jitter * normal.sample(&mut rng)))
                    .collect();
                Kernel::centered(kappa, kappa, taps)
            })
            .collect::<Result<Vec<_>>>()?;
        project_params(&FoEParams::new(vec![alpha; num_filters], kernels)?)
    }
}

/// Projection onto `{α ≥ 0} × {1ᵀ k_ℓ = 0}`.
pub fn project_params(params: &FoEParams) -> Result<FoEParams> {
    let alphas = params.alphas.iter().map(|&a| a.max(0.0)).collect();
    let kernels = params
        .kernels
        .iter()
        .map(|k| {
            let m = k.mean();
            k.with_taps(k.taps().iter().map(|t| t - m).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoEParams { alphas, kernels })
}

/// Checks that `u` lives in the image space of `op` and `f` in its data space.
pub(crate) fn check_shapes(u: &Image, f: &Image, op: &DegradationOp, params: &FoEParams) -> Result<()> {
    let expected = op.output_shape(u.shape())?;
    if expected != f.shape() {
        return Err(Error::ShapeMismatch {
            expected,
            actual: f.shape(),
        });
    }
    let kappa = params.kernel_size();
    if kappa > u.height() || kappa > u.width() {
        return Err(Error::KernelTooLarge {
            kernel: (kappa, kappa),
            image: u.shape(),
        });
    }
    Ok(())
}

/// Filter responses `K_ℓ u` for every filter.
pub(crate) fn responses(u: &Image, params: &FoEParams) -> Vec<Vec<f64>> {
    let (h, w) = u.shape();
    params
        .kernels
        .iter()
        .map(|k| {
            let mut r = vec![0.0; h * w];
            convolve_add(u.as_slice(), h, w, k, &mut r);
            r
        })
        .collect()
}

/// Lower-level energy `J(u; θ, f)`.
pub fn foe_energy(u: &Image, params: &FoEParams, f: &Image, op: &DegradationOp) -> Result<f64> {
    check_shapes(u, f, op, params)?;
    let residual = op.apply(u)?.sub(f);
    let data = 0.5 * residual.norm_sq();
    let reg: f64 = responses(u, params)
        .iter()
        .zip(&params.alphas)
        .map(|(r, &a)| a * r.iter().map(|&x| phi(x)).sum::<f64>())
        .sum();
    Ok(data + reg)
}

/// `∇_u J = Aᵀ(Au − f) + Σ_ℓ α_ℓ K_ℓᵀ φ'(K_ℓ u)`.
pub fn foe_grad_u(u: &Image, params: &FoEParams, f: &Image, op: &DegradationOp) -> Result<Image> {
    Ok(energy_and_grad(u, params, f, op)?.1)
}

pub(crate) fn energy_and_grad(u: &Image, params: &FoEParams, f: &Image, op: &DegradationOp) -> Result<(f64, Image)> {
    check_shapes(u, f, op, params)?;
    let (h, w) = u.shape();
    let residual = op.apply(u)?.sub(f);
    let mut energy = 0.5 * residual.norm_sq();
    let mut grad = op.apply_adjoint(&residual)?;
    for (k, &alpha) in params.kernels.iter().zip(&params.alphas) {
        if alpha == 0.0 {
            continue;
        }
        let mut r = vec![0.0; h * w];
        convolve_add(u.as_slice(), h, w, k, &mut r);
        energy += alpha * r.iter().map(|&x| phi(x)).sum::<f64>();
        let weighted: Vec<f64> = r.iter().map(|&x| alpha * phi_prime(x)).collect();
        correlate_add(&weighted, h, w, k, grad.as_mut_slice());
    }
    Ok((energy, grad))
}

/// Matrix-free `∇²J(u) v = AᵀA v + Σ_ℓ α_ℓ K_ℓᵀ diag(φ''(K_ℓ u)) K_ℓ v`.
pub fn foe_hessian_apply(u: &Image, params: &FoEParams, op: &DegradationOp, v: &Image) -> Result<Image> {
    u.check_same_shape(v)?;
    HessianOperator::new(u, params, op, 0.0)?.apply(v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_image(seed: u64, h: usize, w: usize, amp: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| amp * rng.random_range(-1.0..1.0))
    }

    fn random_params(seed: u64, l: usize, kappa: usize) -> FoEParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..l)
            .map(|_| {
                let taps = (0..kappa * kappa).map(|_| rng.random_range(-1.0..1.0)).collect();
                Kernel::centered(kappa, kappa, taps).unwrap()
            })
            .collect();
        let alphas = (0..l).map(|_| rng.random_range(0.1..1.0)).collect();
        project_params(&FoEParams::new(alphas, kernels).unwrap()).unwrap()
    }

    fn blur3() -> DegradationOp {
        DegradationOp::Blur(
            crate::imgcore::make_blur_kernel(crate::imgcore::BlurKind::Gaussian { width: 3, sigma: 0.8 }).unwrap(),
        )
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0), 0.0);
        assert_eq!(phi_prime(0.0), 0.0);
        assert_eq!(phi_second(0.0), 2.0);
        assert!((phi(1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((phi_prime(1.0) - 1.0).abs() < 1e-15);
        assert_eq!(phi_second(1.0), 0.0);
    }

    #[test]
    fn phi_derivatives_match_central_differences() {
        let h = 1e-6;
        for i in -6..=6 {
            let x = i as f64 * 0.5;
            let fd1 = (phi(x + h) - phi(x - h)) / (2.0 * h);
            let fd2 = (phi_prime(x + h) - phi_prime(x - h)) / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
            assert!(rel(fd1, phi_prime(x)) < 1e-6, "phi' at {x}");
            assert!(rel(fd2, phi_second(x)) < 1e-6, "phi'' at {x}");
        }
    }

    #[test]
    fn energy_trivial_cases() {
        let f = random_image(1, 6, 6, 1.0);
        let mut params = random_params(2, 2, 3);
        params.alphas = vec![0.0, 0.0];
        assert_eq!(foe_energy(&f, &params, &f, &DegradationOp::Identity).unwrap(), 0.0);

        // zero-mean filters annihilate constants: only the data term remains
        let params = random_params(3, 2, 3);
        let u = Image::filled(6, 6, 0.4);
        let e = foe_energy(&u, &params, &f, &DegradationOp::Identity).unwrap();
        assert!((e - 0.5 * u.sub(&f).norm_sq()).abs() < 1e-12);
    }

    /// Independent evaluation of the energy with literal index arithmetic.
    fn energy_oracle(u: &Image, params: &FoEParams, f: &Image, ker: &Kernel) -> f64 {
        let conv = |img: &Image, k: &Kernel| {
            let c = k.rows() as isize / 2;
            let cc = k.cols() as isize / 2;
            Image::from_fn(img.height(), img.width(), |i, j| {
                let mut acc = 0.0;
                for a in 0..k.rows() {
                    for b in 0..k.cols() {
                        acc += k.at(a, b) * img.get_wrapped(i as isize - (a as isize - c), j as isize - (b as isize - cc));
                    }
                }
                acc
            })
        };
        let mut e = 0.5 * conv(u, ker).sub(f).norm_sq();
        for (k, a) in params.kernels.iter().zip(&params.alphas) {
            e += a * conv(u, k).as_slice().iter().map(|x| (1.0 + x * x).ln()).sum::<f64>();
        }
        e
    }

    #[test]
    fn energy_matches_oracle() {
        let u = random_image(4, 7, 7, 1.0);
        let f = random_image(5, 7, 7, 1.0);
        let params = random_params(6, 3, 3);
        let op = blur3();
        let e = foe_energy(&u, &params, &f, &op).unwrap();
        let o = energy_oracle(&u, &params, &f, op.kernel().unwrap());
        assert!((e - o).abs() / o.abs() < 1e-12);
    }

    #[test]
    fn gradient_trivial_and_finite_difference() {
        let u = random_image(7, 8, 8, 1.0);
        let f = random_image(8, 8, 8, 1.0);
        let mut params = random_params(9, 2, 3);
        let zero = FoEParams {
            alphas: vec![0.0; 2],
            ..params.clone()
        };
        let g = foe_grad_u(&u, &zero, &f, &DegradationOp::Identity).unwrap();
        assert!(g.sub(&u.sub(&f)).max_abs() < 1e-14);

        params.alphas = vec![0.7, 1.3];
        let op = blur3();
        let g = foe_grad_u(&u, &params, &f, &op).unwrap();
        let dir = random_image(10, 8, 8, 1.0);
        let h = 1e-6;
        let mut up = u.clone();
        up.axpy(h, &dir);
        let mut um = u.clone();
        um.axpy(-h, &dir);
        let fd = (foe_energy(&up, &params, &f, &op).unwrap() - foe_energy(&um, &params, &f, &op).unwrap()) / (2.0 * h);
        let an = g.dot(&dir);
        assert!((fd - an).abs() / an.abs() < 1e-5, "fd {fd} vs {an}");
    }

    #[test]
    fn hessian_properties() {
        let u = random_image(11, 8, 8, 1.0);
        let f = random_image(12, 8, 8, 1.0);
        let params = random_params(13, 2, 3);
        let op = blur3();
        let v = random_image(14, 8, 8, 1.0);
        let w = random_image(15, 8, 8, 1.0);

        let zero = FoEParams {
            alphas: vec![0.0; 2],
            ..params.clone()
        };
        let hv = foe_hessian_apply(&u, &zero, &op, &v).unwrap();
        assert!(hv.sub(&op.normal_apply(&v).unwrap()).max_abs() < 1e-14);

        let hv = foe_hessian_apply(&u, &params, &op, &v).unwrap();
        let hw = foe_hessian_apply(&u, &params, &op, &w).unwrap();
        assert!((hv.dot(&w) - v.dot(&hw)).abs() < 1e-10);

        let h = 1e-5;
        let mut up = u.clone();
        up.axpy(h, &v);
        let mut um = u.clone();
        um.axpy(-h, &v);
        let fd = foe_grad_u(&up, &params, &f, &op)
            .unwrap()
            .sub(&foe_grad_u(&um, &params, &f, &op).unwrap())
            .scale(0.5 / h);
        let rel = fd.sub(&hv).norm() / hv.norm();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn projection_examples() {
        let k = Kernel::new(1, 3, (0, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let p = project_params(&FoEParams {
            alphas: vec![-1.0, 2.0],
            kernels: vec![k.clone(), k],
        })
        .unwrap();
        assert_eq!(p.alphas, vec![0.0, 2.0]);
        assert_eq!(p.kernels[0].taps(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn dct_init_is_feasible() {
        let p = FoEParams::dct_init(4, 5, 0.01, 1.0, 0.05, 3).unwrap();
        assert!(p.is_feasible(1e-12));
        assert_eq!(p.num_filters(), 4);
        assert!(FoEParams::dct_init(9, 3, 0.01, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn shape_mismatch_reported() {
        let params = random_params(16, 1, 3);
        let r = foe_energy(&Image::zeros(6, 6), &params, &Image::zeros(5, 6), &DegradationOp::Identity);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    proptest::proptest! {
        #[test]
        fn projection_is_idempotent(seed in 0u64..1000, l in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kernels = (0..l).map(|_| {
                Kernel::centered(3, 3, (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
            }).collect();
            let alphas = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = project_params(&FoEParams::new(alphas, kernels).unwrap()).unwrap();
            let pp = project_params(&p).unwrap();
            proptest::prop_assert!(p.is_feasible(1e-12));
            for (a, b) in p.kernels.iter().zip(&pp.kernels) {
                proptest::prop_assert!(a.max_abs_diff(b) <= 1e-15);
            }
            proptest::prop_assert_eq!(p.alphas, pp.alphas);
        }
    }
}
