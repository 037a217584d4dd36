//! Lower-level solve: Barzilai–Borwein gradient steps with Armijo backtracking.

use serde::{Deserialize, Serialize};

use super::{check_shapes, energy_and_grad, foe_energy, FoEParams};
use crate::error::{Error, Result};
use crate::imgcore::{DegradationOp, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LowerSolveConfig {
    /// Armijo sufficient-decrease constant.
    pub sigma: f64,
    /// Backtracking factor.
    pub beta: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma0: f64,
    /// Relative-change stopping tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LowerSolveConfig {
    fn default() -> Self {
        Self {
            sigma: 1e-4,
            beta: 0.5,
            gamma_min: 1e-4,
            gamma_max: 1.0,
            gamma0: 1.0,
            tol: 1e-6,
            max_iter: 8000,
        }
    }
}

impl LowerSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::invalid("sigma", "Armijo constant must lie in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid("beta", "backtracking factor must lie in (0, 1)"));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max && self.gamma_max.is_finite()) {
            return Err(Error::invalid("gamma", "need 0 < gamma_min <= gamma_max < inf"));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::invalid("gamma0", "initial step must be positive"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol", "tolerance must be nonnegative"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "at least one iteration is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LowerSolution {
    pub u: Image,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// BB step used at each iteration (after clamping).
    pub steps: Vec<f64>,
}

/// BB1 step `‖ρ‖² / ⟨ρ, y⟩` clamped to `[gamma_min, gamma_max]`; `gamma_max`
/// when the curvature `⟨ρ, y⟩` is not positive.
pub fn bb1_step(rho: &Image, y: &Image, cfg: &LowerSolveConfig) -> f64 {
    let ry = rho.dot(y);
    if !(ry > 0.0) {
        return cfg.gamma_max;
    }
    (rho.norm_sq() / ry).clamp(cfg.gamma_min, cfg.gamma_max)
}

/// Minimizes the lower-level energy starting from `u0`.
pub fn solve_lower(
    f: &Image,
    op: &DegradationOp,
    params: &FoEParams,
    u0: &Image,
    cfg: &LowerSolveConfig,
) -> Result<LowerSolution> {
    cfg.validate()?;
    check_shapes(u0, f, op, params)?;
    let mut u = u0.clone();
    let (mut energy, mut grad) = energy_and_grad(&u, params, f, op)?;
    if !energy.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: "non-finite energy at the starting point".into(),
        });
    }
    let mut gamma = cfg.gamma0.clamp(cfg.gamma_min, cfg.gamma_max);
    let mut steps = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        steps.push(gamma);
        let slope = -gamma * grad.norm_sq();
        if slope == 0.0 {
            converged = true;
            break;
        }
        let mut nu = 1.0;
        let (trial, trial_energy) = loop {
            let mut trial = u.clone();
            trial.axpy(-nu * gamma, &grad);
            let e = foe_energy(&trial, params, f, op)?;
            if e <= energy + cfg.sigma * nu * slope {
                break (trial, e);
            }
            nu *= cfg.beta;
            if nu < 1e-30 {
                return Err(Error::Divergence {
                    iteration: iterations,
                    reason: format!("line search failed with step gamma = {gamma:e}"),
                });
            }
        };
        let (_, trial_grad) = energy_and_grad(&trial, params, f, op)?;
        let rho = trial.sub(&u);
        let y = trial_grad.sub(&grad);
        gamma = bb1_step(&rho, &y, cfg);

        let unorm = u.norm();
        let change = if unorm > 0.0 { rho.norm() / unorm } else { rho.norm() };
        u = trial;
        energy = trial_energy;
        grad = trial_grad;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(LowerSolution {
        u,
        energy,
        iterations,
        converged,
        steps,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::foe::tests::random_image;
    use crate::foe::{foe_grad_u, project_params};
    use crate::imgcore::{make_blur_kernel, BlurKind, Kernel};

    fn small_params() -> FoEParams {
        let k1 = Kernel::centered(3, 3, vec![0., 0., 0., 0., -1., 1., 0., 0., 0.]).unwrap();
        let k2 = Kernel::centered(3, 3, vec![0., 0., 0., 0., -1., 0., 0., 1., 0.]).unwrap();
        project_params(&FoEParams::new(vec![0.05, 0.05], vec![k1, k2]).unwrap()).unwrap()
    }

    /// Dense Gaussian elimination with partial pivoting.
    pub(crate) fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let m = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= m * a[c][k];
                }
                b[r] -= m * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    #[test]
    fn bb1_clamps() {
        let cfg = LowerSolveConfig::default();
        let rho = Image::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(bb1_step(&rho, &rho.scale(-1.0), &cfg), cfg.gamma_max);
        assert_eq!(bb1_step(&rho, &rho.scale(1e9), &cfg), cfg.gamma_min);
        assert!((bb1_step(&rho, &rho.scale(2.0), &cfg) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_case_matches_dense_solve() {
        // alpha = 0: the minimizer solves H^T H u = H^T f
        let ker = make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.5 }).unwrap();
        let op = DegradationOp::Blur(ker);
        let f = random_image(21, 16, 16, 1.0);
        let mut params = small_params();
        params.alphas = vec![0.0, 0.0];
        let cfg = LowerSolveConfig {
            tol: 1e-13,
            max_iter: 20000,
            ..Default::default()
        };
        let sol = solve_lower(&f, &op, &params, &f, &cfg).unwrap();

        let n = 256;
        let cols: Vec<Image> = (0..n)
            .map(|k| {
                let mut e = Image::zeros(16, 16);
                e.as_mut_slice()[k] = 1.0;
                op.normal_apply(&e).unwrap()
            })
            .collect();
        let a = (0..n).map(|r| (0..n).map(|c| cols[c].as_slice()[r]).collect()).collect();
        let b = op.apply_adjoint(&f).unwrap().into_vec();
        let x = dense_solve(a, b);
        let err = sol.u.as_slice().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn stationarity_and_monotone_energy() {
        let op = DegradationOp::Blur(make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.8 }).unwrap());
        let g = Image::from_fn(12, 12, |i, j| if (i / 4 + j / 6) % 2 == 0 { 0.8 } else { 0.2 });
        let f = op.apply(&g).unwrap();
        let params = small_params();
        let cfg = LowerSolveConfig {
            tol: 1e-10,
            ..Default::default()
        };
        let sol = solve_lower(&f, &op, &params, &f, &cfg).unwrap();
        assert!(sol.converged);
        let grad = foe_grad_u(&sol.u, &params, &f, &op).unwrap();
        assert!(grad.max_abs() < 1e-4, "gradient {}", grad.max_abs());
        assert!(sol.steps.iter().all(|&s| (cfg.gamma_min..=cfg.gamma_max).contains(&s)));

        // energy never increases when the iteration budget is cut short
        let mut prev = foe_energy(&f, &params, &f, &op).unwrap();
        for t in 1..20 {
            let short = LowerSolveConfig { max_iter: t, tol: 0.0, ..cfg };
            let e = solve_lower(&f, &op, &params, &f, &short).unwrap().energy;
            assert!(e <= prev + 1e-15);
            prev = e;
        }
    }

    #[test]
    fn identity_quadratic_converges_to_data() {
        let f = random_image(22, 8, 8, 1.0);
        let mut params = small_params();
        params.alphas = vec![0.0, 0.0];
        let u0 = random_image(23, 8, 8, 1.0);
        let sol = solve_lower(&f, &DegradationOp::Identity, &params, &u0, &LowerSolveConfig::default()).unwrap();
        assert!(sol.u.sub(&f).max_abs() < 1e-6);
    }

    #[test]
    fn invalid_config_rejected() {
        let f = Image::zeros(4, 4);
        let bad = LowerSolveConfig { beta: 1.5, ..Default::default() };
        assert!(solve_lower(&f, &DegradationOp::Identity, &small_params(), &f, &bad).is_err());
    }
}
