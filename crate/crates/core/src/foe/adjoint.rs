//! Adjoint solve and the resulting parameter gradients.

use serde::{Deserialize, Serialize};

use super::{phi_prime, phi_second, responses, FoEParams};
use crate::error::{Error, Result};
use crate::imgcore::{convolve_add, correlate_add, tap_gradient, DegradationOp, Image, Kernel};

/// Hessian of the lower energy at a fixed point, plus an optional shift `ε I`.
#[derive(Debug, Clone)]
pub struct HessianOperator<'a> {
    op: &'a DegradationOp,
    params: &'a FoEParams,
    /// `α_ℓ φ''(K_ℓ u)` per filter.
    curvature: Vec<Vec<f64>>,
    shift: f64,
    shape: (usize, usize),
}

impl<'a> HessianOperator<'a> {
    pub fn new(u: &Image, params: &'a FoEParams, op: &'a DegradationOp, shift: f64) -> Result<Self> {
        op.output_shape(u.shape())?;
        let curvature = responses(u, params)
            .into_iter()
            .zip(&params.alphas)
            .map(|(r, &a)| r.into_iter().map(|x| a * phi_second(x)).collect())
            .collect();
        Ok(Self {
            op,
            params,
            curvature,
            shift,
            shape: u.shape(),
        })
    }

    pub fn apply(&self, v: &Image) -> Result<Image> {
        if v.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: v.shape(),
            });
        }
        let (h, w) = self.shape;
        let mut out = self.op.normal_apply(v)?;
        let mut kv = vec![0.0; h * w];
        for (k, c) in self.params.kernels.iter().zip(&self.curvature) {
            kv.iter_mut().for_each(|x| *x = 0.0);
            convolve_add(v.as_slice(), h, w, k, &mut kv);
            kv.iter_mut().zip(c).for_each(|(x, c)| *x *= c);
            correlate_add(&kv, h, w, k, out.as_mut_slice());
        }
        if self.shift != 0.0 {
            out.axpy(self.shift, v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgConfig {
    /// Relative residual tolerance `‖r‖ / ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Regularizing shift added to the Hessian.
    pub shift: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            shift: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub solution: Image,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Conjugate gradients for `(∇²J(u*) + ε I) p = rhs`.
///
/// Nonconvex filters can make the Hessian indefinite; CG then stops at the
/// first direction of nonpositive curvature and reports `converged = false`.
pub fn solve_adjoint_cg(
    u_star: &Image,
    params: &FoEParams,
    op: &DegradationOp,
    rhs: &Image,
    cfg: &CgConfig,
) -> Result<CgSolution> {
    u_star.check_same_shape(rhs)?;
    let hess = HessianOperator::new(u_star, params, op, cfg.shift)?;
    let bnorm = rhs.norm();
    let mut x = Image::zeros(rhs.height(), rhs.width());
    if bnorm == 0.0 {
        return Ok(CgSolution {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut r = rhs.clone();
    let mut d = r.clone();
    let mut rr = r.norm_sq();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        if rr.sqrt() <= cfg.tol * bnorm {
            converged = true;
            break;
        }
        iterations += 1;
        let hd = hess.apply(&d)?;
        let curv = d.dot(&hd);
        if !(curv > 0.0) {
            break;
        }
        let step = rr / curv;
        x.axpy(step, &d);
        r.axpy(-step, &hd);
        let rr_new = r.norm_sq();
        d = r.add(&d.scale(rr_new / rr));
        rr = rr_new;
    }
    if rr.sqrt() <= cfg.tol * bnorm {
        converged = true;
    }
    if !x.all_finite() {
        return Err(Error::Divergence {
            iteration: iterations,
            reason: "adjoint solve produced non-finite values".into(),
        });
    }
    Ok(CgSolution {
        solution: x,
        iterations,
        relative_residual: rr.sqrt() / bnorm,
        converged,
    })
}

fn check_filter(params: &FoEParams, l: usize) -> Result<()> {
    if l >= params.num_filters() {
        return Err(Error::IndexOutOfRange {
            index: l,
            len: params.num_filters(),
        });
    }
    Ok(())
}

/// Derivative of the upper loss `½‖u* − g‖²` with respect to `α_ℓ`:
/// `⟨K_ℓᵀ φ'(K_ℓ u*), p⟩` where `p` solves `∇²J(u*) p = g − u*`.
pub fn grad_alpha(u_star: &Image, p: &Image, params: &FoEParams, l: usize) -> Result<f64> {
    check_filter(params, l)?;
    u_star.check_same_shape(p)?;
    let (h, w) = u_star.shape();
    let k = &params.kernels[l];
    let mut ku = vec![0.0; h * w];
    convolve_add(u_star.as_slice(), h, w, k, &mut ku);
    let mut kp = vec![0.0; h * w];
    convolve_add(p.as_slice(), h, w, k, &mut kp);
    Ok(ku.iter().zip(&kp).map(|(&a, &b)| phi_prime(a) * b).sum())
}

/// Derivative of the upper loss with respect to the taps of `k_ℓ`, shaped
/// like the filter. `p` solves `∇²J(u*) p = g − u*`.
pub fn grad_kernel(u_star: &Image, p: &Image, params: &FoEParams, l: usize) -> Result<Kernel> {
    check_filter(params, l)?;
    u_star.check_same_shape(p)?;
    let (h, w) = u_star.shape();
    let k = &params.kernels[l];
    let alpha = params.alphas[l];
    let mut ku = vec![0.0; h * w];
    convolve_add(u_star.as_slice(), h, w, k, &mut ku);
    let mut kp = vec![0.0; h * w];
    convolve_add(p.as_slice(), h, w, k, &mut kp);
    let curv: Vec<f64> = ku.iter().zip(&kp).map(|(&a, &b)| phi_second(a) * b).collect();
    let slope: Vec<f64> = ku.iter().map(|&a| phi_prime(a)).collect();
    let g1 = tap_gradient(u_star.as_slice(), &curv, h, w, k);
    let g2 = tap_gradient(p.as_slice(), &slope, h, w, k);
    k.with_taps(g1.iter().zip(&g2).map(|(a, b)| alpha * (a + b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foe::tests::random_image;
    use crate::foe::lower::tests::dense_solve;
    use crate::foe::{foe_grad_u, foe_hessian_apply, project_params, solve_lower, LowerSolveConfig};
    use crate::imgcore::{make_blur_kernel, BlurKind};

    fn params() -> FoEParams {
        let k1 = Kernel::centered(3, 3, vec![0.1, -0.2, 0.0, 0.3, -1.0, 0.9, 0.0, 0.1, -0.1]).unwrap();
        let k2 = Kernel::centered(3, 3, vec![0.0, 0.2, 0.1, -0.1, -1.0, 0.0, 0.1, 0.8, 0.0]).unwrap();
        project_params(&FoEParams::new(vec![0.02, 0.03], vec![k1, k2]).unwrap()).unwrap()
    }

    #[test]
    fn cg_solves_hessian_system() {
        let op = DegradationOp::Blur(make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.5 }).unwrap());
        let u = random_image(31, 8, 8, 0.3);
        let p = params();
        let b = random_image(32, 8, 8, 1.0);
        let sol = solve_adjoint_cg(&u, &p, &op, &b, &CgConfig { tol: 1e-12, ..Default::default() }).unwrap();
        assert!(sol.converged);
        let res = foe_hessian_apply(&u, &p, &op, &sol.solution).unwrap().sub(&b);
        assert!(res.norm() / b.norm() < 1e-10);
    }

    #[test]
    fn cg_matches_dense_solve() {
        let op = DegradationOp::Blur(make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.5 }).unwrap());
        let u = random_image(35, 12, 12, 0.3);
        let p = params();
        let b = random_image(36, 12, 12, 1.0);
        let sol = solve_adjoint_cg(&u, &p, &op, &b, &CgConfig::default()).unwrap();
        let n = 144;
        let cols: Vec<Image> = (0..n)
            .map(|k| {
                let mut e = Image::zeros(12, 12);
                e.as_mut_slice()[k] = 1.0;
                foe_hessian_apply(&u, &p, &op, &e).unwrap()
            })
            .collect();
        let a = (0..n).map(|r| (0..n).map(|c| cols[c].as_slice()[r]).collect()).collect();
        let x = Image::new(12, 12, dense_solve(a, b.clone().into_vec())).unwrap();
        assert!(sol.solution.sub(&x).norm() / x.norm() < 1e-6);
    }

    #[test]
    fn identity_zero_weights_returns_rhs() {
        let mut p = params();
        p.alphas = vec![0.0, 0.0];
        let u = random_image(37, 6, 6, 1.0);
        let b = random_image(38, 6, 6, 1.0);
        let sol = solve_adjoint_cg(&u, &p, &DegradationOp::Identity, &b, &CgConfig::default()).unwrap();
        assert!(sol.solution.sub(&b).max_abs() < 1e-12);
        assert_eq!(grad_alpha(&u, &Image::zeros(6, 6), &p, 0).unwrap(), 0.0);
        assert_eq!(grad_kernel(&u, &b, &p, 1).unwrap().taps().iter().map(|t| t.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let u = random_image(33, 6, 6, 1.0);
        let sol = solve_adjoint_cg(&u, &params(), &DegradationOp::Identity, &Image::zeros(6, 6), &CgConfig::default())
            .unwrap();
        assert_eq!(sol.solution.max_abs(), 0.0);
        assert_eq!(sol.iterations, 0);
    }

    /// Lower solution refined by dense Newton steps, so finite differences of
    /// the loss are not swamped by the first-order solver's floating-point floor.
    fn lower_exact(params: &FoEParams, f: &Image, op: &DegradationOp, u0: &Image) -> Image {
        let cfg = LowerSolveConfig { tol: 1e-10, max_iter: 50_000, ..Default::default() };
        let mut u = solve_lower(f, op, params, u0, &cfg).unwrap().u;
        let n = u.len();
        for _ in 0..3 {
            let cols: Vec<Image> = (0..n)
                .map(|k| {
                    let mut e = Image::zeros(u.height(), u.width());
                    e.as_mut_slice()[k] = 1.0;
                    foe_hessian_apply(&u, params, op, &e).unwrap()
                })
                .collect();
            let a = (0..n).map(|r| (0..n).map(|c| cols[c].as_slice()[r]).collect()).collect();
            let grad = foe_grad_u(&u, params, f, op).unwrap().into_vec();
            let step = dense_solve(a, grad);
            u.as_mut_slice().iter_mut().zip(&step).for_each(|(x, s)| *x -= s);
        }
        u
    }

    fn loss(params: &FoEParams, f: &Image, g: &Image, op: &DegradationOp, u0: &Image) -> f64 {
        0.5 * lower_exact(params, f, op, u0).sub(g).norm_sq()
    }

    #[test]
    fn gradients_match_resolved_finite_differences() {
        let op = DegradationOp::Blur(make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.7 }).unwrap());
        let g = Image::from_fn(8, 8, |i, j| 0.5 + 0.3 * ((i as f64) * 0.8).sin() * ((j as f64) * 0.6).cos());
        let f = op.apply(&g).unwrap().add(&random_image(34, 8, 8, 0.02));
        let p = params();
        let u = lower_exact(&p, &f, &op, &f);
        let adj = solve_adjoint_cg(&u, &p, &op, &g.sub(&u), &CgConfig { tol: 1e-12, ..Default::default() })
            .unwrap()
            .solution;

        let h = 1e-5;
        for l in 0..2 {
            let ga = grad_alpha(&u, &adj, &p, l).unwrap();
            let mut pp = p.clone();
            pp.alphas[l] += h;
            let mut pm = p.clone();
            pm.alphas[l] -= h;
            let fd = (loss(&pp, &f, &g, &op, &u) - loss(&pm, &f, &g, &op, &u)) / (2.0 * h);
            assert!((fd - ga).abs() <= 1e-3 * ga.abs().max(1e-3), "alpha {l}: {fd} vs {ga}");

            let gk = grad_kernel(&u, &adj, &p, l).unwrap();
            for t in 0..9 {
                let mut pp = p.clone();
                pp.kernels[l].taps_mut()[t] += h;
                let mut pm = p.clone();
                pm.kernels[l].taps_mut()[t] -= h;
                let fd = (loss(&pp, &f, &g, &op, &u) - loss(&pm, &f, &g, &op, &u)) / (2.0 * h);
                let an = gk.taps()[t];
                assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "k{l}[{t}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn out_of_range_filter() {
        let u = Image::zeros(4, 4);
        assert!(matches!(grad_alpha(&u, &u, &params(), 2), Err(Error::IndexOutOfRange { .. })));
    }
}
