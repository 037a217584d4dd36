//! Learned discretizations of total variation.
//!
//! The lower problem is the saddle point
//! `min_{u,q} max_p ⟨Du − F*q, p⟩ + λ‖q‖ + ½‖Au − f‖²`, where a family of
//! small interpolation filters `F = (F^l)` maps the staggered dual field
//! `p = (p¹, p²)` to `L` co-located pairs `q^l`. With a single pair of delta
//! filters this is the usual isotropic TV on forward differences.

mod ops;
mod piggyback;
mod prox;
mod train;

pub use ops::{apply_f, apply_f_adjoint, group_shrink, group_shrink_jacobian_apply};
pub use piggyback::{filter_grad, piggyback_pd, AdjointDrive, AdjointState, PiggybackConfig, SaddleState};
pub use prox::{prox_data, prox_data_jacobian_apply, DataProx};
pub use train::{restore_tv, train_tv_filters, TrainedTv, TvTrainConfig, TvTrainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::fft::Fft2;
use crate::imgcore::{Image, Kernel};

/// Support of `F^{l,1}`, acting on the vertical differences.
pub const F1_SHAPE: (usize, usize) = (2, 3);
pub const F1_ANCHOR: (usize, usize) = (0, 1);
/// Support of `F^{l,2}`, acting on the horizontal differences.
pub const F2_SHAPE: (usize, usize) = (3, 2);
pub const F2_ANCHOR: (usize, usize) = (1, 0);

/// The two components of a dual field, co-located with the image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPair {
    pub p1: Image,
    pub p2: Image,
}

impl DualPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            p1: Image::zeros(height, width),
            p2: Image::zeros(height, width),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.p1.shape()
    }

    pub fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        for c in [&self.p1, &self.p2] {
            if c.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: c.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &DualPair) -> f64 {
        self.p1.dot(&other.p1) + self.p2.dot(&other.p2)
    }

    pub fn norm_sq(&self) -> f64 {
        self.p1.norm_sq() + self.p2.norm_sq()
    }

    pub fn max_abs(&self) -> f64 {
        self.p1.max_abs().max(self.p2.max_abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    None,
    Transpose,
    Rot90,
}

impl Symmetry {
    pub fn name(self) -> &'static str {
        match self {
            Symmetry::None => "none",
            Symmetry::Transpose => "transpose",
            Symmetry::Rot90 => "rot90",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Symmetry::None),
            "transpose" => Ok(Symmetry::Transpose),
            "rot90" => Ok(Symmetry::Rot90),
            _ => Err(Error::invalid("symmetry", format!("unknown symmetry '{s}'"))),
        }
    }

    /// Whether the group tables exist for `l` filters.
    pub fn check_count(self, l: usize) -> Result<()> {
        if self == Symmetry::Rot90 && l % 4 != 0 {
            return Err(Error::invalid(
                "symmetry",
                format!("rot90 orbits have four filters; L = {l} is not a multiple of 4"),
            ));
        }
        Ok(())
    }
}

/// `(F^{l,1}, F^{l,2})`: a 2×3 filter for `p¹` and a 3×2 filter for `p²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    pub f1: Kernel,
    pub f2: Kernel,
}

impl FilterPair {
    pub fn new(f1_taps: Vec<f64>, f2_taps: Vec<f64>) -> Result<Self> {
        Ok(Self {
            f1: Kernel::new(F1_SHAPE.0, F1_SHAPE.1, F1_ANCHOR, f1_taps)?,
            f2: Kernel::new(F2_SHAPE.0, F2_SHAPE.1, F2_ANCHOR, f2_taps)?,
        })
    }

    pub fn zeros() -> Self {
        Self::new(vec![0.0; 6], vec![0.0; 6]).expect("fixed shapes")
    }

    /// Forward differences: both filters pick the sample at the anchor.
    pub fn delta() -> Self {
        let mut f1 = vec![0.0; 6];
        f1[F1_ANCHOR.0 * F1_SHAPE.1 + F1_ANCHOR.1] = 1.0;
        let mut f2 = vec![0.0; 6];
        f2[F2_ANCHOR.0 * F2_SHAPE.1 + F2_ANCHOR.1] = 1.0;
        Self::new(f1, f2).expect("fixed shapes")
    }

    fn check(&self) -> Result<()> {
        if (self.f1.rows(), self.f1.cols()) != F1_SHAPE || self.f1.anchor() != F1_ANCHOR {
            return Err(Error::invalid("filters", "first filter must be 2x3 anchored at (0, 1)"));
        }
        if (self.f2.rows(), self.f2.cols()) != F2_SHAPE || self.f2.anchor() != F2_ANCHOR {
            return Err(Error::invalid("filters", "second filter must be 3x2 anchored at (1, 0)"));
        }
        Ok(())
    }

    /// Mirror across the main diagonal; the components trade places.
    fn transposed(&self) -> Self {
        let mut f1 = vec![0.0; 6];
        let mut f2 = vec![0.0; 6];
        // F2 (3x2) tap (a, b) -> F1 (2x3) tap (b, a), and vice versa
        for a in 0..3 {
            for b in 0..2 {
                f1[b * 3 + a] = self.f2.at(a, b);
                f2[a * 2 + b] = self.f1.at(b, a);
            }
        }
        Self::new(f1, f2).expect("fixed shapes")
    }

    /// Quarter turn clockwise; the components trade places.
    fn rotated(&self) -> Self {
        let mut f1 = vec![0.0; 6];
        let mut f2 = vec![0.0; 6];
        // F2 tap (a, b) -> F1 tap (b, 2 - a); F1 tap (a, b) -> F2 tap (b, 1 - a)
        for a in 0..3 {
            for b in 0..2 {
                f1[b * 3 + (2 - a)] = self.f2.at(a, b);
            }
        }
        for a in 0..2 {
            for b in 0..3 {
                f2[b * 2 + (1 - a)] = self.f1.at(a, b);
            }
        }
        Self::new(f1, f2).expect("fixed shapes")
    }

    fn axpy(&mut self, a: f64, other: &FilterPair) {
        for (x, y) in self.f1.taps_mut().iter_mut().zip(other.f1.taps()) {
            *x += a * y;
        }
        for (x, y) in self.f2.taps_mut().iter_mut().zip(other.f2.taps()) {
            *x += a * y;
        }
    }

    fn scale(&mut self, a: f64) {
        self.f1.taps_mut().iter_mut().for_each(|x| *x *= a);
        self.f2.taps_mut().iter_mut().for_each(|x| *x *= a);
    }
}

/// `F = (F^l)_{l < L}` together with the symmetry it is constrained to.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterFamily {
    pub pairs: Vec<FilterPair>,
    pub symmetry: Symmetry,
}

impl FilterFamily {
    pub fn new(pairs: Vec<FilterPair>, symmetry: Symmetry) -> Result<Self> {
        let fam = Self { pairs, symmetry };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid("L", "a filter family needs at least one pair"));
        }
        self.pairs.iter().try_for_each(FilterPair::check)?;
        self.symmetry.check_count(self.pairs.len())
    }

    pub fn num_filters(&self) -> usize {
        self.pairs.len()
    }

    /// Forward differences, `L = 1`.
    pub fn fd() -> Self {
        Self::new(vec![FilterPair::delta()], Symmetry::None).expect("valid preset")
    }

    /// Three interpolations: pixel centers, vertical-edge and horizontal-edge midpoints.
    pub fn cd3() -> Self {
        Self::new(cd_pairs(false), Symmetry::None).expect("valid preset")
    }

    /// [`FilterFamily::cd3`] plus cell centers.
    pub fn cd4() -> Self {
        Self::new(cd_pairs(true), Symmetry::None).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fd" => Ok(Self::fd()),
            "cd3" => Ok(Self::cd3()),
            "cd4" => Ok(Self::cd4()),
            _ => Err(Error::invalid("preset", format!("unknown preset '{name}' (fd, cd3, cd4)"))),
        }
    }

    /// `L` copies of the forward-difference pair with seeded Gaussian
    /// perturbations of variance `variance`, then projected.
    pub fn perturbed_fd(l: usize, symmetry: Symmetry, variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::invalid("variance", "must be nonnegative"));
        }
        let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::invalid("variance", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..l)
            .map(|_| {
                let mut pair = FilterPair::delta();
                pair.f1.taps_mut().iter_mut().for_each(|t| *t += normal.sample(&mut rng));
                pair.f2.taps_mut().iter_mut().for_each(|t| *t += normal.sample(&mut rng));
                pair
            })
            .collect();
        let fam = Self::new(pairs, symmetry)?;
        project_symmetry(&project_sum_mu(&fam))
    }

    /// Tap sums of all `2L` kernels, ordered `F^{0,1}, F^{0,2}, F^{1,1}, ...`.
    pub fn kernel_sums(&self) -> Vec<f64> {
        self.pairs.iter().flat_map(|p| [p.f1.sum(), p.f2.sum()]).collect()
    }

    /// All taps, pair by pair, `F^{l,1}` before `F^{l,2}`, row-major.
    pub fn to_taps(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .flat_map(|p| p.f1.taps().iter().chain(p.f2.taps()).copied())
            .collect()
    }

    pub fn from_taps(taps: &[f64], symmetry: Symmetry) -> Result<Self> {
        if taps.is_empty() || taps.len() % 12 != 0 {
            return Err(Error::invalid("taps", format!("{} taps is not a multiple of 12", taps.len())));
        }
        let pairs = taps
            .chunks(12)
            .map(|c| FilterPair::new(c[..6].to_vec(), c[6..].to_vec()))
            .collect::<Result<_>>()?;
        Self::new(pairs, symmetry)
    }

    /// `self − a · grad`, keeping the symmetry tag.
    pub fn stepped(&self, a: f64, grad: &[FilterPair]) -> Result<Self> {
        if grad.len() != self.pairs.len() {
            return Err(Error::IndexOutOfRange {
                index: grad.len(),
                len: self.pairs.len(),
            });
        }
        let mut out = self.clone();
        for (p, g) in out.pairs.iter_mut().zip(grad) {
            p.axpy(-a, g);
        }
        Ok(out)
    }

    /// `‖F‖²` on an `h × w` periodic grid: `F*F` is block diagonal over the
    /// two components and diagonalized by the DFT.
    pub fn operator_norm_sq(&self, height: usize, width: usize) -> Result<f64> {
        if height < 3 || width < 3 {
            return Err(Error::KernelTooLarge {
                kernel: (3, 3),
                image: (height, width),
            });
        }
        let fft = Fft2::new(height, width);
        let mut acc1 = vec![0.0; height * width];
        let mut acc2 = vec![0.0; height * width];
        for p in &self.pairs {
            for (acc, k) in [(&mut acc1, &p.f1), (&mut acc2, &p.f2)] {
                for (a, z) in acc.iter_mut().zip(fft.kernel_spectrum(k)) {
                    *a += z.norm_sqr();
                }
            }
        }
        Ok(acc1.iter().chain(&acc2).fold(0.0, |m, &v| m.max(v)))
    }
}

fn cd_pairs(cell_center: bool) -> Vec<FilterPair> {
    // taps are row-major: F1 is 2x3, F2 is 3x2
    let h = 0.5;
    let qr = 0.25;
    let mut pairs = vec![
        FilterPair::new(vec![0., h, 0., 0., h, 0.], vec![0., 0., h, h, 0., 0.]).unwrap(),
        FilterPair::new(vec![0., 1., 0., 0., 0., 0.], vec![qr, qr, qr, qr, 0., 0.]).unwrap(),
        FilterPair::new(vec![qr, qr, 0., qr, qr, 0.], vec![0., 0., 1., 0., 0., 0.]).unwrap(),
    ];
    if cell_center {
        pairs.push(FilterPair::new(vec![h, h, 0., 0., 0., 0.], vec![h, 0., h, 0., 0., 0.]).unwrap());
    }
    pairs
}

/// Orthogonal projection onto `{all 2L kernel sums equal}`, with the common
/// sum chosen as the mean of the current sums.
pub fn project_sum_mu(fam: &FilterFamily) -> FilterFamily {
    let sums = fam.kernel_sums();
    let mu = sums.iter().sum::<f64>() / sums.len() as f64;
    let mut out = fam.clone();
    for p in &mut out.pairs {
        for k in [&mut p.f1, &mut p.f2] {
            let shift = (mu - k.sum()) / k.len() as f64;
            k.taps_mut().iter_mut().for_each(|t| *t += shift);
        }
    }
    out
}

/// Average over the orbit of the symmetry group.
///
/// Transpose pairs filters `(2m, 2m+1)` for even `L`; for odd `L` filter 0
/// is its own transpose and the rest are paired. Rot90 cycles filters
/// within consecutive blocks of four.
pub fn project_symmetry(fam: &FilterFamily) -> Result<FilterFamily> {
    fam.symmetry.check_count(fam.num_filters())?;
    let l = fam.num_filters();
    let pairs = match fam.symmetry {
        Symmetry::None => fam.pairs.clone(),
        Symmetry::Transpose => (0..l)
            .map(|i| {
                let partner = transpose_partner(i, l);
                let mut p = fam.pairs[i].clone();
                p.axpy(1.0, &fam.pairs[partner].transposed());
                p.scale(0.5);
                p
            })
            .collect(),
        Symmetry::Rot90 => (0..l)
            .map(|i| {
                let base = i - i % 4;
                let mut acc = FilterPair::zeros();
                for k in 0..4 {
                    // rot^k applied to the filter k steps back in the cycle
                    let mut term = fam.pairs[base + (i % 4 + 4 - k) % 4].clone();
                    for _ in 0..k {
                        term = term.rotated();
                    }
                    acc.axpy(0.25, &term);
                }
                acc
            })
            .collect(),
    };
    Ok(FilterFamily {
        pairs,
        symmetry: fam.symmetry,
    })
}

fn transpose_partner(i: usize, l: usize) -> usize {
    if l % 2 == 1 {
        if i == 0 {
            0
        } else {
            // pairs (1, 2), (3, 4), ...
            if i % 2 == 1 {
                i + 1
            } else {
                i - 1
            }
        }
    } else {
        i ^ 1
    }
}

/// The group action itself, used to check invariance.
pub fn apply_symmetry_generator(fam: &FilterFamily) -> Result<FilterFamily> {
    fam.symmetry.check_count(fam.num_filters())?;
    let l = fam.num_filters();
    let mut pairs = fam.pairs.clone();
    match fam.symmetry {
        Symmetry::None => {}
        Symmetry::Transpose => {
            for i in 0..l {
                pairs[transpose_partner(i, l)] = fam.pairs[i].transposed();
            }
        }
        Symmetry::Rot90 => {
            for i in 0..l {
                let next = i - i % 4 + (i % 4 + 1) % 4;
                pairs[next] = fam.pairs[i].rotated();
            }
        }
    }
    Ok(FilterFamily {
        pairs,
        symmetry: fam.symmetry,
    })
}
