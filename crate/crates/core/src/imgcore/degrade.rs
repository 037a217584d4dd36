use serde::{Deserialize, Serialize};

use super::conv::{adjoint_convolve, periodic_convolve};
use super::{Image, Kernel};
use crate::error::{Error, Result};

/// Forward model `A` of `f = A u + e`.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOp {
    Identity,
    /// Periodic blur `H`.
    Blur(Kernel),
    /// `S H`: periodic blur followed by keeping rows and columns whose index
    /// is a multiple of `factor`.
    DecimatedBlur { kernel: Kernel, factor: usize },
}

/// Task label attached to stored models and CLI options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Deblur,
    Sr,
}

impl DegradationOp {
    pub fn decimated(kernel: Kernel, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid("factor", "decimation factor must be at least 2"));
        }
        Ok(DegradationOp::DecimatedBlur { kernel, factor })
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        match self {
            DegradationOp::Identity => None,
            DegradationOp::Blur(k) => Some(k),
            DegradationOp::DecimatedBlur { kernel, .. } => Some(kernel),
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            DegradationOp::DecimatedBlur { factor, .. } => *factor,
            _ => 1,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            DegradationOp::DecimatedBlur { .. } => TaskKind::Sr,
            _ => TaskKind::Deblur,
        }
    }

    /// Shape of `A u` for an image-space shape.
    pub fn output_shape(&self, shape: (usize, usize)) -> Result<(usize, usize)> {
        let d = self.factor();
        if shape.0 % d != 0 || shape.1 % d != 0 {
            return Err(Error::invalid(
                "factor",
                format!("image {}x{} is not divisible by {d}", shape.0, shape.1),
            ));
        }
        Ok((shape.0 / d, shape.1 / d))
    }

    /// Image-space shape for a data-space shape.
    pub fn input_shape(&self, data_shape: (usize, usize)) -> (usize, usize) {
        let d = self.factor();
        (data_shape.0 * d, data_shape.1 * d)
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            DegradationOp::Identity => Ok(img.clone()),
            DegradationOp::Blur(k) => periodic_convolve(img, k),
            DegradationOp::DecimatedBlur { kernel, factor } => {
                self.output_shape(img.shape())?;
                decimate(&periodic_convolve(img, kernel)?, *factor)
            }
        }
    }

    /// `A^T` applied to a data-space image.
    pub fn apply_adjoint(&self, data: &Image) -> Result<Image> {
        match self {
            DegradationOp::Identity => Ok(data.clone()),
            DegradationOp::Blur(k) => adjoint_convolve(data, k),
            DegradationOp::DecimatedBlur { kernel, factor } => {
                adjoint_convolve(&zero_fill(data, *factor), kernel)
            }
        }
    }

    /// Starting image for a restoration: the data itself for deblurring,
    /// pixel replication for super-resolution.
    pub fn initial_guess(&self, data: &Image) -> Image {
        match self {
            DegradationOp::DecimatedBlur { factor, .. } => upsample_replicate(data, *factor),
            _ => data.clone(),
        }
    }

    /// `A^T A v`.
    pub fn normal_apply(&self, img: &Image) -> Result<Image> {
        self.apply_adjoint(&self.apply(img)?)
    }
}

/// `S`: keeps pixels `(i, j)` with `i ≡ 0` and `j ≡ 0 (mod d)`.
pub fn decimate(img: &Image, d: usize) -> Result<Image> {
    if d == 0 || img.height() % d != 0 || img.width() % d != 0 {
        return Err(Error::invalid(
            "factor",
            format!("image {:?} is not divisible by {d}", img.shape()),
        ));
    }
    Ok(Image::from_fn(img.height() / d, img.width() / d, |i, j| {
        img.get(i * d, j * d)
    }))
}

/// `S^T`: places each sample at `(d i, d j)` and zeros elsewhere.
pub fn zero_fill(img: &Image, d: usize) -> Image {
    let mut out = Image::zeros(img.height() * d, img.width() * d);
    for i in 0..img.height() {
        for j in 0..img.width() {
            out.set(i * d, j * d, img.get(i, j));
        }
    }
    out
}

/// Pixel replication, the naive super-resolution baseline.
pub fn upsample_replicate(img: &Image, d: usize) -> Image {
    Image::from_fn(img.height() * d, img.width() * d, |i, j| img.get(i / d, j / d))
}
