//! Binary rasters and their PGM encoding.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{LadaError, Result};

/// Side length of every mask handled by the pipeline.
pub const CANVAS: usize = 64;

/// H x W raster with values in {0, 1}.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

/// Chip mask: 1 where light passes.
pub type MaskImage = BinaryImage;
/// Printed pattern: 1 where resist remains.
pub type ResistImage = BinaryImage;

impl std::fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryImage({}x{}, {} set)", self.h, self.w, self.count_ones())
    }
}

impl BinaryImage {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryImage {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        BinaryImage {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        BinaryImage { h, w, data }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(LadaError::InvalidInput(format!(
                "{} values for a {h}x{w} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(LadaError::InvalidInput(format!("non-binary pixel value {v}")));
        }
        Ok(BinaryImage { h, w, data })
    }

    /// Centered `side x side` square on an `n x n` canvas.
    pub fn centered_square(n: usize, side: usize) -> Self {
        let lo = (n - side) / 2;
        Self::from_fn(n, n, |y, x| (lo..lo + side).contains(&y) && (lo..lo + side).contains(&x))
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v as u8;
    }

    pub fn flip(&mut self, y: usize, x: usize) {
        self.data[y * self.w + x] ^= 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    /// Toroidal shift by (dy, dx).
    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        let (h, w) = (self.h as isize, self.w as isize);
        Self::from_fn(self.h, self.w, |y, x| {
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            self.get(sy, sx)
        })
    }

    /// Pixelwise `self <= other`.
    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// `2M - 1` encoding as a `1 x H x W` tensor.
    pub fn encode(&self) -> Tensor<f32> {
        Tensor::new(
            &[1, self.h, self.w],
            self.data.iter().map(|&v| if v != 0 { 1.0 } else { -1.0 }).collect(),
        )
        .expect("dims match")
    }

    /// `{0,1}` values as an `H x W` tensor (segmentation target).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&v| v as f32).collect()).expect("dims match")
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        write_pgm_bytes(path, self.h, self.w, &bytes)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (h, w, bytes) = read_pgm_bytes(path)?;
        let mut data = Vec::with_capacity(bytes.len());
        for b in bytes {
            data.push(match b {
                0 => 0,
                255 => 1,
                v => {
                    return Err(LadaError::Format {
                        path: path.to_path_buf(),
                        reason: format!("binary PGM holds value {v}, expected 0 or 255"),
                    })
                }
            });
        }
        Ok(BinaryImage { h, w, data })
    }
}

/// Writes an 8-bit binary (P5) PGM.
pub fn write_pgm_bytes(path: &Path, h: usize, w: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| LadaError::io(path, e))
}

/// Writes values in `[-1, 1]` as an 8-bit grey PGM.
pub fn write_pgm_signed(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8)
        .collect();
    write_pgm_bytes(path, h, w, &bytes)
}

pub fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path).map_err(|e| LadaError::io(path, e))?;
    let bad = |reason: &str| LadaError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < raw.len() && raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < raw.len() && raw[i] == b'#' {
            while i < raw.len() && raw[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = &raw[i + 1..];
    if payload.len() != w * h {
        return Err(bad("payload size does not match header"));
    }
    Ok((h, w, payload.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = BinaryImage::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        m.write_pgm(&p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n7 5\n255\n"));
        assert_eq!(raw.len(), 11 + 35);
        assert_eq!(BinaryImage::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn grey_values_are_rejected_as_masks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        write_pgm_bytes(&p, 1, 2, &[0, 128]).unwrap();
        assert!(BinaryImage::read_pgm(&p).is_err());
    }

    #[test]
    fn shift_wraps() {
        let mut m = BinaryImage::zeros(4, 4);
        m.set(3, 3, true);
        let s = m.shifted(1, 2);
        assert!(s.get(0, 1));
        assert_eq!(s.count_ones(), 1);
    }

    #[test]
    fn encoding_is_plus_minus_one() {
        let m = BinaryImage::from_fn(2, 2, |y, _| y == 0);
        assert_eq!(m.encode().data(), &[1.0, 1.0, -1.0, -1.0]);
    }
}
