//! Binary filter-bank files.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! "BLRF1"  kind:u8  symmetry:u8
//! FoE:     L:u32 κ:u32  α[L]:f64  taps[L·κ·κ]:f64
//! TVDisc:  L:u32 r1:u32 c1:u32 r2:u32 c2:u32  (F¹ taps, F² taps)[L]:f64
//! ```
//!
//! Metadata (training config, seed, loss history) goes to a JSON sidecar
//! at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::foe::FoEParams;
use crate::imgcore::Kernel;
use crate::tvdisc::{FilterFamily, Symmetry, F1_SHAPE, F2_SHAPE};

pub const MAGIC: &[u8; 5] = b"BLRF1";

#[derive(Debug, Clone, PartialEq)]
pub enum FilterBank {
    FoE(FoEParams),
    TvDisc(FilterFamily),
}

impl FilterBank {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FilterBank::FoE(_) => "foe",
            FilterBank::TvDisc(_) => "tvdisc",
        }
    }
}

fn sym_tag(s: Symmetry) -> u8 {
    match s {
        Symmetry::None => 0,
        Symmetry::Transpose => 1,
        Symmetry::Rot90 => 2,
    }
}

pub fn encode_filter_bank(bank: &FilterBank) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let f64le = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    match bank {
        FilterBank::FoE(p) => {
            out.extend_from_slice(&[0, 0]);
            u32le(&mut out, p.num_filters());
            u32le(&mut out, p.kernel_size());
            p.alphas.iter().for_each(|&a| f64le(&mut out, a));
            for k in &p.kernels {
                k.taps().iter().for_each(|&t| f64le(&mut out, t));
            }
        }
        FilterBank::TvDisc(fam) => {
            out.extend_from_slice(&[1, sym_tag(fam.symmetry)]);
            u32le(&mut out, fam.num_filters());
            for d in [F1_SHAPE.0, F1_SHAPE.1, F2_SHAPE.0, F2_SHAPE.1] {
                u32le(&mut out, d);
            }
            fam.to_taps().into_iter().for_each(|t| f64le(&mut out, t));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated payload at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let len = n.checked_mul(8).ok_or("count overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_filter_bank(bytes: &[u8]) -> std::result::Result<FilterBank, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a BLRF1 filter bank (magic mismatch)".into());
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let kind = r.u8()?;
    let sym = match r.u8()? {
        0 => Symmetry::None,
        1 => Symmetry::Transpose,
        2 => Symmetry::Rot90,
        t => return Err(format!("unknown symmetry tag {t}")),
    };
    let bank = match kind {
        0 => {
            if sym != Symmetry::None {
                return Err("FoE banks carry no symmetry".into());
            }
            let l = r.u32()?;
            let kappa = r.u32()?;
            let alphas = r.f64s(l)?;
            let kernels = (0..l)
                .map(|_| {
                    let taps = r.f64s(kappa.checked_mul(kappa).ok_or("count overflow")?)?;
                    Kernel::centered(kappa, kappa, taps).map_err(|e| e.to_string())
                })
                .collect::<std::result::Result<_, String>>()?;
            FilterBank::FoE(FoEParams::new(alphas, kernels).map_err(|e| e.to_string())?)
        }
        1 => {
            let l = r.u32()?;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            if dims != [F1_SHAPE.0, F1_SHAPE.1, F2_SHAPE.0, F2_SHAPE.1] {
                return Err(format!("unsupported filter dimensions {dims:?}"));
            }
            let per = F1_SHAPE.0 * F1_SHAPE.1 + F2_SHAPE.0 * F2_SHAPE.1;
            let taps = r.f64s(l.checked_mul(per).ok_or("count overflow")?)?;
            FilterBank::TvDisc(FilterFamily::from_taps(&taps, sym).map_err(|e| e.to_string())?)
        }
        k => return Err(format!("unknown payload kind {k}")),
    };
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(bank)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the bank and, when given, its metadata sidecar.
pub fn write_filter_bank(path: impl AsRef<Path>, bank: &FilterBank, metadata: Option<&serde_json::Value>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_filter_bank(bank)).map_err(|e| Error::io(path, e))?;
    if let Some(meta) = metadata {
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(meta).map_err(|e| Error::format(&side, e.to_string()))?;
        fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

pub fn read_filter_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_filter_bank(&bytes).map_err(|reason| Error::format(path, reason))
}

/// The sidecar of `path`, if present.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Option<serde_json::Value>> {
    let side = sidecar_path(path.as_ref());
    match fs::read_to_string(&side) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(&side, e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&side, e)),
    }
}
