//! The filter operator `F`, its adjoint, and group soft-thresholding.

use super::{DualPair, FilterFamily};
use crate::error::{Error, Result};
use crate::imgcore::{convolve_add, correlate_add};

fn check_kernels_fit(fam: &FilterFamily, shape: (usize, usize)) -> Result<()> {
    if shape.0 < 3 || shape.1 < 3 {
        return Err(Error::KernelTooLarge {
            kernel: (3, 3),
            image: shape,
        });
    }
    fam.validate()
}

/// `F p = (F^{l,1} p¹, F^{l,2} p²)_l`.
pub fn apply_f(fam: &FilterFamily, p: &DualPair) -> Result<Vec<DualPair>> {
    let shape = p.shape();
    p.check_shape(shape)?;
    check_kernels_fit(fam, shape)?;
    let mut out = vec![DualPair::zeros(shape.0, shape.1); fam.num_filters()];
    f_add(fam, p.p1.as_slice(), p.p2.as_slice(), shape.0, shape.1, 1.0, &mut out);
    Ok(out)
}

/// `F* z = Σ_l (F^{l,1}ᵀ z^{l,1}, F^{l,2}ᵀ z^{l,2})`.
pub fn apply_f_adjoint(fam: &FilterFamily, z: &[DualPair]) -> Result<DualPair> {
    if z.len() != fam.num_filters() {
        return Err(Error::invalid(
            "q",
            format!("{} dual pairs for {} filters", z.len(), fam.num_filters()),
        ));
    }
    let shape = z[0].shape();
    for zl in z {
        zl.check_shape(shape)?;
    }
    check_kernels_fit(fam, shape)?;
    let mut out = DualPair::zeros(shape.0, shape.1);
    let DualPair { p1, p2 } = &mut out;
    f_adjoint_add(fam, z, shape.0, shape.1, p1.as_mut_slice(), p2.as_mut_slice());
    Ok(out)
}

/// `out += a · F p`, on flat buffers.
pub(crate) fn f_add(fam: &FilterFamily, p1: &[f64], p2: &[f64], h: usize, w: usize, a: f64, out: &mut [DualPair]) {
    let mut tmp = vec![0.0; h * w];
    for (pair, o) in fam.pairs.iter().zip(out.iter_mut()) {
        for (k, src, dst) in [(&pair.f1, p1, &mut o.p1), (&pair.f2, p2, &mut o.p2)] {
            if a == 1.0 {
                convolve_add(src, h, w, k, dst.as_mut_slice());
            } else {
                tmp.iter_mut().for_each(|x| *x = 0.0);
                convolve_add(src, h, w, k, &mut tmp);
                dst.as_mut_slice().iter_mut().zip(&tmp).for_each(|(d, t)| *d += a * t);
            }
        }
    }
}

/// `(o1, o2) += F* z`.
pub(crate) fn f_adjoint_add(fam: &FilterFamily, z: &[DualPair], h: usize, w: usize, o1: &mut [f64], o2: &mut [f64]) {
    for (pair, zl) in fam.pairs.iter().zip(z) {
        correlate_add(zl.p1.as_slice(), h, w, &pair.f1, o1);
        correlate_add(zl.p2.as_slice(), h, w, &pair.f2, o2);
    }
}

/// Proximal map of `kappa · Σ_l Σ_i ‖(z^{l,1}_i, z^{l,2}_i)‖₂`.
pub fn group_shrink(z: &[DualPair], kappa: f64) -> Result<Vec<DualPair>> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid("kappa", "threshold must be nonnegative"));
    }
    let mut out = z.to_vec();
    for zl in &mut out {
        zl.check_shape(zl.p1.shape())?;
        shrink_in_place(zl, kappa);
    }
    Ok(out)
}

pub(crate) fn shrink_in_place(z: &mut DualPair, kappa: f64) {
    let (a, b) = (z.p1.as_mut_slice(), z.p2.as_mut_slice());
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let r = x.hypot(*y);
        let s = if r > kappa { 1.0 - kappa / r } else { 0.0 };
        *x *= s;
        *y *= s;
    }
}

/// Jacobian of [`group_shrink`] at `z`, applied to `v`. On the sphere
/// `‖z_i‖ = kappa` the zero branch is used.
pub fn group_shrink_jacobian_apply(z: &[DualPair], kappa: f64, v: &[DualPair]) -> Result<Vec<DualPair>> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid("kappa", "threshold must be nonnegative"));
    }
    if z.len() != v.len() {
        return Err(Error::invalid("v", "direction and point have different L"));
    }
    let mut out = v.to_vec();
    for (zl, vl) in z.iter().zip(out.iter_mut()) {
        vl.check_shape(zl.shape())?;
        shrink_jacobian_in_place(zl, kappa, vl);
    }
    Ok(out)
}

pub(crate) fn shrink_jacobian_in_place(z: &DualPair, kappa: f64, v: &mut DualPair) {
    let (za, zb) = (z.p1.as_slice(), z.p2.as_slice());
    let (va, vb) = (v.p1.as_mut_slice(), v.p2.as_mut_slice());
    for i in 0..za.len() {
        let (x, y) = (za[i], zb[i]);
        let r = x.hypot(y);
        if r > kappa {
            let s = 1.0 - kappa / r;
            let c = kappa / (r * r * r) * (x * va[i] + y * vb[i]);
            va[i] = s * va[i] + c * x;
            vb[i] = s * vb[i] + c * y;
        } else {
            va[i] = 0.0;
            vb[i] = 0.0;
        }
    }
}

pub(crate) fn duals_finite(z: &[DualPair]) -> bool {
    z.iter().all(|d| d.p1.all_finite() && d.p2.all_finite())
}
