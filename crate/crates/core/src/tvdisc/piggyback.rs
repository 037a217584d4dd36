//! Primal-dual iterations for the lower saddle problem, run jointly with
//! the linearized (adjoint) iterations that carry loss sensitivities.

use serde::{Deserialize, Serialize};

use super::ops::{duals_finite, f_add, f_adjoint_add, shrink_in_place, shrink_jacobian_in_place};
use super::prox::DataProx;
use super::{DualPair, FilterFamily, FilterPair};
use crate::error::{Error, Result};
use crate::imgcore::{grad_adjoint_into, grad_into, tap_gradient, DegradationOp, Image};

/// `‖D‖² ≤ 8` for periodic forward differences.
const GRAD_NORM_SQ: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiggybackConfig {
    pub sigma_p: f64,
    pub tau_u: f64,
    pub tau_q: f64,
    pub theta: f64,
    /// Number of iterations `K`.
    pub iterations: usize,
    pub lambda: f64,
}

impl PiggybackConfig {
    /// Steps with `σ_p (τ_u ‖D‖² + τ_q ‖F‖²) ≤ 0.99`, split evenly between
    /// the two primal blocks, for `F` acting on `shape`.
    pub fn stable(fam: &FilterFamily, shape: (usize, usize), iterations: usize, lambda: f64) -> Result<Self> {
        let f_norm_sq = fam.operator_norm_sq(shape.0, shape.1)?;
        if !(f_norm_sq > 0.0) {
            return Err(Error::invalid("filters", "the filter operator is zero"));
        }
        let sigma_p = 1.0 / GRAD_NORM_SQ.sqrt();
        Ok(Self {
            sigma_p,
            tau_u: 0.495 / (sigma_p * GRAD_NORM_SQ),
            tau_q: 0.495 / (sigma_p * f_norm_sq),
            theta: 1.0,
            iterations,
            lambda,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_p", self.sigma_p), ("tau_u", self.tau_u), ("tau_q", self.tau_q)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "step size must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid("theta", "extrapolation must lie in [0, 1]"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "regularization weight must be positive"));
        }
        Ok(())
    }

    /// Whether `σ_p (τ_u ‖D‖² + τ_q ‖F‖²) ≤ 1`.
    pub fn is_stable(&self, fam: &FilterFamily, shape: (usize, usize)) -> Result<bool> {
        let f = fam.operator_norm_sq(shape.0, shape.1)?;
        Ok(self.sigma_p * (self.tau_u * GRAD_NORM_SQ + self.tau_q * f) <= 1.0 + 1e-12)
    }
}

/// `(u, q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub u: Image,
    pub q: Vec<DualPair>,
    pub p: DualPair,
}

impl SaddleState {
    /// Starts from `u0` with zero duals.
    pub fn new(u0: Image, num_filters: usize) -> Self {
        let (h, w) = u0.shape();
        Self {
            q: vec![DualPair::zeros(h, w); num_filters],
            p: DualPair::zeros(h, w),
            u: u0,
        }
    }

    fn check(&self, l: usize) -> Result<()> {
        let shape = self.u.shape();
        if self.q.len() != l {
            return Err(Error::invalid("q", format!("{} dual pairs for {l} filters", self.q.len())));
        }
        self.p.check_shape(shape)?;
        self.q.iter().try_for_each(|d| d.check_shape(shape))
    }
}

/// `(U, Q, P)`, mirroring [`SaddleState`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub u: Image,
    pub q: Vec<DualPair>,
    pub p: DualPair,
}

impl AdjointState {
    pub fn zeros(height: usize, width: usize, num_filters: usize) -> Self {
        Self {
            u: Image::zeros(height, width),
            q: vec![DualPair::zeros(height, width); num_filters],
            p: DualPair::zeros(height, width),
        }
    }

    fn check(&self, l: usize, shape: (usize, usize)) -> Result<()> {
        if self.u.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: self.u.shape(),
            });
        }
        if self.q.len() != l {
            return Err(Error::invalid("Q", format!("{} dual pairs for {l} filters", self.q.len())));
        }
        self.p.check_shape(shape)?;
        self.q.iter().try_for_each(|d| d.check_shape(shape))
    }

    pub fn is_zero(&self) -> bool {
        self.u.max_abs() == 0.0 && self.p.max_abs() == 0.0 && self.q.iter().all(|d| d.max_abs() == 0.0)
    }
}

/// What drives the adjoint iterations.
#[derive(Debug, Clone, Copy)]
pub enum AdjointDrive<'a> {
    /// Adjoint iterations are skipped.
    Off,
    /// Adjoint iterations run with a zero loss gradient.
    Homogeneous,
    /// Loss `½‖u − g‖²` with ground truth `g`.
    Target(&'a Image),
}

struct Scratch {
    r1: Vec<f64>,
    r2: Vec<f64>,
    fq1: Vec<f64>,
    fq2: Vec<f64>,
    pbar1: Vec<f64>,
    pbar2: Vec<f64>,
    div: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            r1: vec![0.0; n],
            r2: vec![0.0; n],
            fq1: vec![0.0; n],
            fq2: vec![0.0; n],
            pbar1: vec![0.0; n],
            pbar2: vec![0.0; n],
            div: vec![0.0; n],
        }
    }
}

/// Dual ascent with extrapolation: `p ← p + σ (Du − F*q)` and
/// `p̄ = p_new + θ (p_new − p_old)`, left in the scratch buffers.
fn dual_step(fam: &FilterFamily, u: &Image, q: &[DualPair], p: &mut DualPair, sigma: f64, theta: f64, s: &mut Scratch) {
    let (h, w) = u.shape();
    grad_into(u.as_slice(), h, w, &mut s.r1, &mut s.r2);
    s.fq1.fill(0.0);
    s.fq2.fill(0.0);
    f_adjoint_add(fam, q, h, w, &mut s.fq1, &mut s.fq2);
    let ext = (1.0 + theta) * sigma;
    for (p, r, fq, pbar) in [
        (p.p1.as_mut_slice(), &s.r1, &s.fq1, &mut s.pbar1),
        (p.p2.as_mut_slice(), &s.r2, &s.fq2, &mut s.pbar2),
    ] {
        for i in 0..p.len() {
            let res = r[i] - fq[i];
            pbar[i] = p[i] + ext * res;
            p[i] += sigma * res;
        }
    }
}

/// Runs `cfg.iterations` coupled iterations, updating both states in place.
pub fn piggyback_pd(
    fam: &FilterFamily,
    op: &DegradationOp,
    f: &Image,
    drive: AdjointDrive<'_>,
    cfg: &PiggybackConfig,
    saddle: &mut SaddleState,
    adjoint: &mut AdjointState,
) -> Result<()> {
    cfg.validate()?;
    fam.validate()?;
    let l = fam.num_filters();
    saddle.check(l)?;
    let shape = saddle.u.shape();
    let (h, w) = shape;
    let expected = op.output_shape(shape)?;
    if f.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: f.shape(),
        });
    }
    let run_adjoint = !matches!(drive, AdjointDrive::Off);
    if run_adjoint {
        adjoint.check(l, shape)?;
    }
    if let AdjointDrive::Target(g) = drive {
        g.check_same_shape(&saddle.u)?;
    }
    let n = h * w;
    let prox = DataProx::new(op, cfg.tau_u, shape)?;
    let data_rhs = op.apply_adjoint(f)?.scale(cfg.tau_u);
    let kappa = cfg.tau_q * cfg.lambda;
    let mut s = Scratch::new(n);
    let mut sa = Scratch::new(n);
    let mut qbar = saddle.q.clone();
    let mut qbar_adj = adjoint.q.clone();

    for k in 0..cfg.iterations {
        dual_step(fam, &saddle.u, &saddle.q, &mut saddle.p, cfg.sigma_p, cfg.theta, &mut s);
        if run_adjoint {
            dual_step(fam, &adjoint.u, &adjoint.q, &mut adjoint.p, cfg.sigma_p, cfg.theta, &mut sa);
        }

        // primal image: ū = u − τ_u D*p̄, u ← prox(ū)
        grad_adjoint_into(&s.pbar1, &s.pbar2, h, w, &mut s.div);
        if run_adjoint {
            grad_adjoint_into(&sa.pbar1, &sa.pbar2, h, w, &mut sa.div);
            let au = adjoint.u.as_mut_slice();
            let u = saddle.u.as_slice();
            match drive {
                AdjointDrive::Target(g) => {
                    let g = g.as_slice();
                    for i in 0..n {
                        au[i] -= cfg.tau_u * (sa.div[i] + u[i] - g[i]);
                    }
                }
                _ => {
                    for i in 0..n {
                        au[i] -= cfg.tau_u * sa.div[i];
                    }
                }
            }
            prox.solve_in_place(au);
        }
        {
            let u = saddle.u.as_mut_slice();
            let rhs = data_rhs.as_slice();
            for i in 0..n {
                u[i] = u[i] - cfg.tau_u * s.div[i] + rhs[i];
            }
            prox.solve_in_place(u);
        }

        // primal dual-field: q̄ = q + τ_q F p̄, q ← shrink(q̄)
        qbar.clone_from(&saddle.q);
        f_add(fam, &s.pbar1, &s.pbar2, h, w, cfg.tau_q, &mut qbar);
        saddle.q.clone_from(&qbar);
        saddle.q.iter_mut().for_each(|z| shrink_in_place(z, kappa));
        if run_adjoint {
            qbar_adj.clone_from(&adjoint.q);
            f_add(fam, &sa.pbar1, &sa.pbar2, h, w, cfg.tau_q, &mut qbar_adj);
            for (z, v) in qbar.iter().zip(qbar_adj.iter_mut()) {
                shrink_jacobian_in_place(z, kappa, v);
            }
            adjoint.q.clone_from(&qbar_adj);
        }

        if (k + 1) % 32 == 0 || k + 1 == cfg.iterations {
            let ok = saddle.u.all_finite()
                && saddle.p.p1.all_finite()
                && saddle.p.p2.all_finite()
                && duals_finite(&saddle.q)
                && (!run_adjoint || (adjoint.u.all_finite() && duals_finite(&adjoint.q)));
            if !ok {
                return Err(Error::Divergence {
                    iteration: k + 1,
                    reason: format!(
                        "non-finite iterate with sigma_p = {:e}, tau_u = {:e}, tau_q = {:e}",
                        cfg.sigma_p, cfg.tau_u, cfg.tau_q
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Gradient of the loss with respect to every tap of `F`:
/// `−(Q ⊗ p + q ⊗ P)`, the tap derivatives of `⟨Q, F p⟩ + ⟨q, F P⟩`.
pub fn filter_grad(fam: &FilterFamily, saddle: &SaddleState, adjoint: &AdjointState) -> Result<Vec<FilterPair>> {
    let l = fam.num_filters();
    saddle.check(l)?;
    let shape = saddle.u.shape();
    adjoint.check(l, shape)?;
    let (h, w) = shape;
    fam.pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let comp = |k, p: &Image, qa: &Image, pa: &Image, qs: &Image| -> Vec<f64> {
                let a = tap_gradient(p.as_slice(), qa.as_slice(), h, w, k);
                let b = tap_gradient(pa.as_slice(), qs.as_slice(), h, w, k);
                a.iter().zip(&b).map(|(x, y)| -(x + y)).collect()
            };
            let g1 = comp(&pair.f1, &saddle.p.p1, &adjoint.q[i].p1, &adjoint.p.p1, &saddle.q[i].p1);
            let g2 = comp(&pair.f2, &saddle.p.p2, &adjoint.q[i].p2, &adjoint.p.p2, &saddle.q[i].p2);
            FilterPair::new(g1, g2)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foe::tests::random_image;
    use crate::imgcore::{make_blur_kernel, BlurKind};
    use crate::tvdisc::tests::random_family;
    use crate::tvdisc::Symmetry;

    fn solve(fam: &FilterFamily, op: &DegradationOp, f: &Image, k: usize, lambda: f64) -> SaddleState {
        let cfg = PiggybackConfig::stable(fam, op.input_shape(f.shape()), k, lambda).unwrap();
        let mut s = SaddleState::new(op.initial_guess(f), fam.num_filters());
        let mut a = AdjointState::zeros(1, 1, 0);
        piggyback_pd(fam, op, f, AdjointDrive::Off, &cfg, &mut s, &mut a).unwrap();
        s
    }

    /// Projected gradient on the dual of `½‖u − f‖² + λ Σ_i ‖(∇u)_i‖₂`,
    /// with its own periodic forward differences; `u = f + div p`.
    fn tv_denoise_oracle(f: &Image, lambda: f64, iters: usize) -> Image {
        let (h, w) = f.shape();
        let f = f.as_slice();
        let mut u = f.to_vec();
        let (mut px, mut py) = (vec![0.0; h * w], vec![0.0; h * w]);
        for _ in 0..iters {
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    let a = px[k] + 0.125 * (u[i * w + (j + 1) % w] - u[k]);
                    let b = py[k] + 0.125 * (u[((i + 1) % h) * w + j] - u[k]);
                    let s = (a.hypot(b) / lambda).max(1.0);
                    px[k] = a / s;
                    py[k] = b / s;
                }
            }
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    u[k] = f[k] + px[k] - px[i * w + (j + w - 1) % w] + py[k] - py[((i + h - 1) % h) * w + j];
                }
            }
        }
        Image::new(h, w, u).unwrap()
    }

    #[test]
    fn fd_filters_give_isotropic_tv() {
        let f = random_image(1, 8, 8, 1.0);
        let s = solve(&FilterFamily::fd(), &DegradationOp::Identity, &f, 5000, 0.2);
        let oracle = tv_denoise_oracle(&f, 0.2, 20000);
        assert!(s.u.sub(&oracle).max_abs() < 1e-4, "{}", s.u.sub(&oracle).max_abs());
    }

    #[test]
    fn constant_data_is_a_fixed_point() {
        let f = Image::from_fn(8, 8, |_, _| 0.37);
        let fam = random_family(2, 2, Symmetry::Transpose);
        let s = solve(&fam, &DegradationOp::Identity, &f, 50, 1.0);
        assert!(s.u.sub(&f).max_abs() < 1e-14);
    }

    #[test]
    fn homogeneous_adjoint_stays_zero_and_does_not_touch_the_saddle() {
        let f = random_image(3, 8, 8, 1.0);
        let g = random_image(4, 8, 8, 1.0);
        let fam = random_family(5, 2, Symmetry::None);
        let op = DegradationOp::Identity;
        let cfg = PiggybackConfig::stable(&fam, (8, 8), 200, 0.3).unwrap();
        let mut s0 = SaddleState::new(f.clone(), 2);
        let mut off = AdjointState::zeros(1, 1, 0);
        piggyback_pd(&fam, &op, &f, AdjointDrive::Off, &cfg, &mut s0, &mut off).unwrap();

        let mut s1 = SaddleState::new(f.clone(), 2);
        let mut a1 = AdjointState::zeros(8, 8, 2);
        piggyback_pd(&fam, &op, &f, AdjointDrive::Homogeneous, &cfg, &mut s1, &mut a1).unwrap();
        assert!(a1.is_zero());

        let mut s2 = SaddleState::new(f.clone(), 2);
        let mut a2 = AdjointState::zeros(8, 8, 2);
        piggyback_pd(&fam, &op, &f, AdjointDrive::Target(&g), &cfg, &mut s2, &mut a2).unwrap();
        assert!(!a2.is_zero());
        assert_eq!(s0, s1);
        assert_eq!(s0, s2);
    }

    /// Loss at `fam`, re-solving from a nearby converged state.
    fn loss_from(fam: &FilterFamily, op: &DegradationOp, f: &Image, g: &Image, lambda: f64, start: &SaddleState) -> f64 {
        let cfg = PiggybackConfig::stable(fam, (8, 8), 30000, lambda).unwrap();
        let mut s = start.clone();
        let mut a = AdjointState::zeros(1, 1, 0);
        piggyback_pd(fam, op, f, AdjointDrive::Off, &cfg, &mut s, &mut a).unwrap();
        0.5 * s.u.sub(g).norm_sq()
    }

    #[test]
    fn filter_gradient_matches_finite_differences() {
        let g = Image::from_fn(8, 8, |i, j| if (i + j) % 8 < 4 { 1.0 } else { 0.0 });
        let k = make_blur_kernel(BlurKind::Gaussian { width: 3, sigma: 0.7 }).unwrap();
        for op in [DegradationOp::Identity, DegradationOp::Blur(k)] {
            let f = op.apply(&g).unwrap().add(&random_image(7, 8, 8, 0.1));
            let fam = FilterFamily::perturbed_fd(2, Symmetry::None, 1e-2, 8).unwrap();
            let lambda = 0.05;
            let cfg = PiggybackConfig::stable(&fam, (8, 8), 30000, lambda).unwrap();
            let mut s = SaddleState::new(f.clone(), 2);
            let mut a = AdjointState::zeros(8, 8, 2);
            piggyback_pd(&fam, &op, &f, AdjointDrive::Target(&g), &cfg, &mut s, &mut a).unwrap();
            let grad = FilterFamily::new(filter_grad(&fam, &s, &a).unwrap(), Symmetry::None).unwrap().to_taps();
            let taps = fam.to_taps();
            let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let h = 1e-5;
            for t in (0..taps.len()).step_by(5) {
                let mut tp = taps.clone();
                tp[t] += h;
                let mut tm = taps.clone();
                tm[t] -= h;
                let fp = FilterFamily::from_taps(&tp, Symmetry::None).unwrap();
                let fm = FilterFamily::from_taps(&tm, Symmetry::None).unwrap();
                let fd = (loss_from(&fp, &op, &f, &g, lambda, &s) - loss_from(&fm, &op, &f, &g, lambda, &s)) / (2.0 * h);
                assert!(
                    (fd - grad[t]).abs() <= 5e-2 * scale.max(1e-3),
                    "tap {t}: fd {fd} vs {}",
                    grad[t]
                );
            }
        }
    }

    #[test]
    fn oversized_steps_report_divergence() {
        let f = random_image(9, 8, 8, 1.0);
        let fam = FilterFamily::fd();
        let mut cfg = PiggybackConfig::stable(&fam, (8, 8), 2000, 0.01).unwrap();
        cfg.sigma_p *= 1e3;
        cfg.tau_q *= 1e3;
        let mut s = SaddleState::new(f.clone(), 1);
        let mut a = AdjointState::zeros(1, 1, 0);
        let err = piggyback_pd(&fam, &DegradationOp::Identity, &f, AdjointDrive::Off, &cfg, &mut s, &mut a).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(err.to_string().contains("sigma_p"));
    }

    #[test]
    fn stable_steps_satisfy_the_condition() {
        for (l, sym) in [(1, Symmetry::None), (2, Symmetry::Transpose), (4, Symmetry::Rot90)] {
            let fam = random_family(10 + l as u64, l, sym);
            let cfg = PiggybackConfig::stable(&fam, (12, 10), 1, 1.0).unwrap();
            assert!(cfg.is_stable(&fam, (12, 10)).unwrap());
            let mut bad = cfg;
            bad.tau_u *= 2.5;
            assert!(!bad.is_stable(&fam, (12, 10)).unwrap());
        }
    }

    #[test]
    fn mismatched_states_are_rejected() {
        let f = random_image(11, 8, 8, 1.0);
        let fam = FilterFamily::cd3();
        let cfg = PiggybackConfig::stable(&fam, (8, 8), 1, 1.0).unwrap();
        let mut s = SaddleState::new(f.clone(), 2);
        let mut a = AdjointState::zeros(8, 8, 3);
        assert!(piggyback_pd(&fam, &DegradationOp::Identity, &f, AdjointDrive::Off, &cfg, &mut s, &mut a).is_err());
        let mut s = SaddleState::new(f.clone(), 3);
        let mut a = AdjointState::zeros(8, 8, 2);
        assert!(piggyback_pd(&fam, &DegradationOp::Identity, &f, AdjointDrive::Homogeneous, &cfg, &mut s, &mut a).is_err());
    }
}
