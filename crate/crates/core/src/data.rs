//! Training and test sets: binary edge images, synthetic scenes, patches
//! cut from image directories, and their degradation.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{add_awgn, make_blur_kernel, BlurKind, DegradationOp, Image, Kernel};

/// Named blur settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlurPreset {
    /// Gaussian, `ς = 0.5`.
    #[serde(rename = "gaussianA")]
    GaussianA,
    /// Gaussian, `ς = 1`.
    #[serde(rename = "gaussianB")]
    GaussianB,
    /// Gaussian, `ς = 1.5`.
    #[serde(rename = "gaussianC")]
    GaussianC,
    /// 5×5 Gaussian, `σ = 1`.
    #[serde(rename = "gauss5")]
    Gauss5,
    #[serde(rename = "disk5")]
    Disk5,
    /// Horizontal, length 5.
    #[serde(rename = "motion5")]
    Motion5,
}

impl BlurPreset {
    pub const ALL: [BlurPreset; 6] = [
        BlurPreset::GaussianA,
        BlurPreset::GaussianB,
        BlurPreset::GaussianC,
        BlurPreset::Gauss5,
        BlurPreset::Disk5,
        BlurPreset::Motion5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlurPreset::GaussianA => "gaussianA",
            BlurPreset::GaussianB => "gaussianB",
            BlurPreset::GaussianC => "gaussianC",
            BlurPreset::Gauss5 => "gauss5",
            BlurPreset::Disk5 => "disk5",
            BlurPreset::Motion5 => "motion5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("blur", format!("unknown blur `{s}`")))
    }

    pub fn kind(self) -> BlurKind {
        // Gaussians with ς from a width are truncated at 3ς
        let gauss = |sigma: f64| BlurKind::Gaussian {
            width: 2 * (3.0 * sigma).ceil() as usize + 1,
            sigma,
        };
        match self {
            BlurPreset::GaussianA => gauss(0.5),
            BlurPreset::GaussianB => gauss(1.0),
            BlurPreset::GaussianC => gauss(1.5),
            BlurPreset::Gauss5 => BlurKind::Gaussian { width: 5, sigma: 1.0 },
            BlurPreset::Disk5 => BlurKind::Disk { diameter: 5 },
            BlurPreset::Motion5 => BlurKind::Motion { length: 5, angle: 0.0 },
        }
    }

    pub fn kernel(self) -> Kernel {
        make_blur_kernel(self.kind()).expect("preset kernels are valid")
    }
}

/// Boundary handling when synthesizing the degraded data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Periodic,
    /// Blur a reflexively padded copy, then crop back.
    ReflexiveCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// `s` edges at orientations `2jπ/s`, `size × size`.
    EdgeSet { s: usize, size: usize, seed: u64 },
    /// Random piecewise-smooth scenes.
    Scenes { count: usize, size: usize, seed: u64 },
    /// Patches cut from every PGM in `dir`.
    PatchSet {
        dir: PathBuf,
        patches_per_image: usize,
        patch_size: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub degradation: DegradationOp,
    pub noise_sigma: f64,
    pub padding: Padding,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", "noise level must be nonnegative"));
        }
        let size = match &self.kind {
            DatasetKind::EdgeSet { s, size, .. } => {
                if *s == 0 {
                    return Err(Error::invalid("s", "need at least one image"));
                }
                *size
            }
            DatasetKind::Scenes { count, size, .. } => {
                if *count == 0 {
                    return Err(Error::invalid("count", "need at least one image"));
                }
                *size
            }
            DatasetKind::PatchSet {
                patches_per_image,
                patch_size,
                ..
            } => {
                if *patches_per_image == 0 {
                    return Err(Error::invalid("patches_per_image", "need at least one patch"));
                }
                *patch_size
            }
        };
        if size < 2 {
            return Err(Error::invalid("size", "images must be at least 2×2"));
        }
        self.degradation.output_shape((size, size))?;
        Ok(())
    }

    fn seed(&self) -> u64 {
        match &self.kind {
            DatasetKind::EdgeSet { seed, .. } | DatasetKind::Scenes { seed, .. } | DatasetKind::PatchSet { seed, .. } => {
                *seed
            }
        }
    }

    /// Ground truths only.
    pub fn ground_truths(&self) -> Result<Vec<Image>> {
        self.validate()?;
        match &self.kind {
            DatasetKind::EdgeSet { s, size, seed } => edge_images(*s, *size, *seed),
            DatasetKind::Scenes { count, size, seed } => {
                Ok((0..*count).map(|j| synthetic_scene(*size, seed.wrapping_add(j as u64))).collect())
            }
            DatasetKind::PatchSet {
                dir,
                patches_per_image,
                patch_size,
                seed,
            } => {
                let sources = crate::metio::read_pgm_dir(dir)?;
                Ok(extract_patches(&sources, *patches_per_image, *patch_size, *seed)?
                    .into_iter()
                    .map(|p| p.image)
                    .collect())
            }
        }
    }
}

/// Binary edge: 1 where `(j − c)cos θ + (i − c')sin θ ≥ shift`, with
/// `(c', c)` the geometric center.
pub fn gen_edge_image(theta: f64, shift: f64, size: usize) -> Result<Image> {
    if size < 2 {
        return Err(Error::invalid("size", "edge images must be at least 2×2"));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    Ok(Image::from_fn(size, size, |i, j| {
        if (j as f64 - c) * co + (i as f64 - c) * s >= shift {
            1.0
        } else {
            0.0
        }
    }))
}

/// `θ_j = 2jπ/s` with shifts uniform in `[−0.5, 0.5]`.
pub fn edge_images(s: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / s as f64;
            gen_edge_image(theta, rng.random_range(-0.5..=0.5), size)
        })
        .collect()
}

/// Piecewise-smooth test scene in `[0, 1]`: a shaded background with
/// random rectangles, disks and a few thin stripes.
pub fn synthetic_scene(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let (gx, gy, base) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.3..0.7));
    let mut img = Image::from_fn(size, size, |i, j| base + gx * (j as f64 / n - 0.5) + gy * (i as f64 / n - 0.5));
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let v = rng.random_range(0.0..1.0);
        let (ci, cj) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let r = rng.random_range(0.08..0.3) * n;
        match rng.random_range(0..3) {
            0 => {
                let r2 = rng.random_range(0.08..0.3) * n;
                paint(&mut img, v, |y, x| (y - ci).abs() <= r && (x - cj).abs() <= r2);
            }
            1 => paint(&mut img, v, |y, x| (y - ci).powi(2) + (x - cj).powi(2) <= r * r),
            _ => {
                let a = rng.random_range(0.0..PI);
                let (s, c) = a.sin_cos();
                let wid = rng.random_range(1.0..3.0);
                paint(&mut img, v, |y, x| ((x - cj) * s - (y - ci) * c).abs() <= wid && (y - ci).hypot(x - cj) <= r);
            }
        }
    }
    img.clipped(0.0, 1.0)
}

fn paint(img: &mut Image, v: f64, inside: impl Fn(f64, f64) -> bool) {
    let (h, w) = img.shape();
    for i in 0..h {
        for j in 0..w {
            if inside(i as f64, j as f64) {
                img.set(i, j, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Image,
    pub source: usize,
    pub top: usize,
    pub left: usize,
}

/// `patches_per_image` square patches per source, at uniform random corners.
pub fn extract_patches(sources: &[Image], patches_per_image: usize, patch_size: usize, seed: u64) -> Result<Vec<Patch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sources.len() * patches_per_image);
    for (idx, src) in sources.iter().enumerate() {
        let (h, w) = src.shape();
        if patch_size == 0 || patch_size > h || patch_size > w {
            return Err(Error::KernelTooLarge {
                kernel: (patch_size, patch_size),
                image: (h, w),
            });
        }
        for _ in 0..patches_per_image {
            let top = rng.random_range(0..=h - patch_size);
            let left = rng.random_range(0..=w - patch_size);
            out.push(Patch {
                image: src.crop(top, left, patch_size, patch_size)?,
                source: idx,
                top,
                left,
            });
        }
    }
    Ok(out)
}

/// `A g` under the chosen boundary handling.
pub fn degrade(g: &Image, op: &DegradationOp, padding: Padding) -> Result<Image> {
    match (padding, op.kernel()) {
        (Padding::ReflexiveCrop, Some(k)) => {
            let d = op.factor();
            let radius = k.rows().max(k.cols());
            // keep the sampling phase: pad by a multiple of d
            let pad = radius.div_ceil(d) * d;
            let f = op.apply(&g.pad_reflect(pad))?;
            let (h, w) = op.output_shape(g.shape())?;
            f.crop(pad / d, pad / d, h, w)
        }
        _ => op.apply(g),
    }
}

/// `f = A g + n` with periodic boundaries and noise seeded by `seed`.
pub fn degrade_pair(g: &Image, op: &DegradationOp, sigma: f64, seed: u64) -> Result<(Image, Image)> {
    let f = add_awgn(&op.apply(g)?, sigma, seed)?;
    Ok((g.clone(), f))
}

/// Ground truths and their degraded observations; the noise of sample `j`
/// is seeded with `seed + j + 1`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<(Image, Image)>> {
    let truths = spec.ground_truths()?;
    let seed = spec.seed();
    truths
        .into_iter()
        .enumerate()
        .map(|(j, g)| {
            let f = degrade(&g, &spec.degradation, spec.padding)?;
            let f = add_awgn(&f, spec.noise_sigma, seed.wrapping_add(j as u64 + 1))?;
            Ok((g, f))
        })
        .collect()
}

/// Edge-set convenience wrapper.
pub fn gen_edge_dataset(
    s: usize,
    size: usize,
    seed: u64,
    op: &DegradationOp,
    noise_sigma: f64,
    padding: Padding,
) -> Result<Vec<(Image, Image)>> {
    gen_dataset(&DatasetSpec {
        kind: DatasetKind::EdgeSet { s, size, seed },
        degradation: op.clone(),
        noise_sigma,
        padding,
    })
}
