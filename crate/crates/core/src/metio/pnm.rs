//! Netpbm grayscale (P2/P5) and color (P6) images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgcore::Image;

/// Reads a P2 or P5 file; samples are divided by maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Writes binary P5 with maxval 255.
pub fn write_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_pgm_with(img, path, 255, false)
}

/// Writes `img` clipped to `[0, 1]` and quantized by `round(v · maxval)`.
pub fn write_pgm_with(img: &Image, path: impl AsRef<Path>, maxval: u16, ascii: bool) -> Result<()> {
    let path = path.as_ref();
    if maxval == 0 {
        return Err(Error::invalid("maxval", "must be positive"));
    }
    let bytes = encode_pgm(img, maxval, ascii);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize(v: f64, maxval: u16) -> u16 {
    (v.clamp(0.0, 1.0) * maxval as f64 + 0.5).floor() as u16
}

pub fn encode_pgm(img: &Image, maxval: u16, ascii: bool) -> Vec<u8> {
    let (h, w) = img.shape();
    let mut out = Vec::new();
    let magic = if ascii { "P2" } else { "P5" };
    write!(out, "{magic}\n{w} {h}\n{maxval}\n").unwrap();
    if ascii {
        for row in img.as_slice().chunks(w) {
            let line: Vec<String> = row.iter().map(|&v| quantize(v, maxval).to_string()).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    } else {
        for &v in img.as_slice() {
            let q = quantize(v, maxval);
            if maxval < 256 {
                out.push(q as u8);
            } else {
                out.extend_from_slice(&q.to_be_bytes());
            }
        }
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    /// Offset of the first sample byte.
    data: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("missing netpbm magic".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header value out of range".to_string())?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed header".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data: pos + 1,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let hd = parse_header(bytes)?;
    let n = hd.width * hd.height;
    let m = hd.maxval as f64;
    let data = &bytes[hd.data..];
    let samples: Vec<f64> = match &hd.magic {
        b"P5" => {
            let wide = hd.maxval > 255;
            let need = if wide { 2 * n } else { n };
            if data.len() < need {
                return Err(format!("truncated payload: {} of {need} bytes", data.len()));
            }
            if wide {
                data[..need].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m).collect()
            } else {
                data[..n].iter().map(|&b| b as f64 / m).collect()
            }
        }
        b"P2" => {
            let text = std::str::from_utf8(data).map_err(|_| "non-ASCII payload".to_string())?;
            let vals: Vec<f64> = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(str::split_ascii_whitespace)
                .take(n)
                .map(|t| t.parse::<usize>().map_err(|_| format!("bad sample `{t}`")))
                .map(|r| r.map(|v| v as f64 / m))
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() < n {
                return Err(format!("truncated payload: {} of {n} samples", vals.len()));
            }
            vals
        }
        _ => return Err(format!("unsupported format {}", String::from_utf8_lossy(&hd.magic))),
    };
    if samples.iter().any(|&v| v > 1.0) {
        return Err("sample exceeds maxval".into());
    }
    Image::new(hd.height, hd.width, samples).map_err(|e| e.to_string())
}

/// Every `.pgm` file in `dir`, in file-name order.
pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .pgm images found"));
    }
    paths.iter().map(read_pgm).collect()
}

/// RGB of the diverging map: `+1` red, `0` white, `−1` blue.
pub fn error_color(e: f64) -> [u8; 3] {
    let e = e.clamp(-1.0, 1.0);
    let c = |x: f64| (255.0 * x + 0.5).floor() as u8;
    if e >= 0.0 {
        [255, c(1.0 - e), c(1.0 - e)]
    } else {
        [c(1.0 + e), c(1.0 + e), 255]
    }
}

/// P6 false-color map of `u − g`.
pub fn write_error_map(u: &Image, g: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    u.check_same_shape(g)?;
    let (h, w) = u.shape();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (a, b) in u.as_slice().iter().zip(g.as_slice()) {
        out.extend_from_slice(&error_color(a - b));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
