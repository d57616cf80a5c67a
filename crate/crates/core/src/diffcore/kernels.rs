//! Low-level loops shared by the forward and reverse passes.

use num_complex::Complex;
use rustfft::FftPlanner;

use super::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Toroidal,
}

/// Geometry of a "same"-padded convolution with odd kernel extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            oh: (h - 1) / stride + 1,
            ow: (w - 1) / stride + 1,
            padding,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize, half: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - half as isize;
        match self.padding {
            Padding::Zero => (pos >= 0 && (pos as usize) < n).then_some(pos as usize),
            Padding::Toroidal => Some(pos.rem_euclid(n as isize) as usize),
        }
    }

    /// Unfolds `x` (`c x h x w`) into a `(c*kh*kw) x (oh*ow)` patch matrix.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (hh, hw) = (self.kh / 2, self.kw / 2);
        let cols = self.cols();
        let mut out = vec![T::zero(); self.rows() * cols];
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut out[r * cols..(r + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, hh, self.h) else {
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 && self.padding == Padding::Zero {
                            // contiguous interior span plus zero fringes
                            let lo = hw.saturating_sub(kx);
                            let hi = (self.w + hw).saturating_sub(kx).min(self.ow);
                            if lo < hi {
                                let s0 = lo + kx - hw;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                if let Some(ix) = self.source(ox, kx, hw, self.w) {
                                    *d = src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds patch gradients back onto the image.
    pub fn col2im<T: Real>(&self, col: &[T]) -> Vec<T> {
        let (hh, hw) = (self.kh / 2, self.kw / 2);
        let cols = self.cols();
        let mut out = vec![T::zero(); self.c * self.h * self.w];
        for ci in 0..self.c {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &col[r * cols..(r + 1) * cols];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, hh, self.h) else {
                            continue;
                        };
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &g) in src.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kx, hw, self.w) {
                                dst[ix] = dst[ix] + g;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Frequency indices kept along an axis of extent `n`: every `k` with
/// `min(k, n - k) <= modes`, in ascending order.
pub fn retained_frequencies(n: usize, modes: usize) -> Vec<usize> {
    (0..n).filter(|&k| k.min(n - k) <= modes).collect()
}

/// In-place 2-D DFT of a row-major `h x w` complex plane. The inverse is unnormalised.
pub(crate) fn fft2<T: Real>(planner: &mut FftPlanner<T>, buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Full 2-D spectrum of one real plane.
pub fn dft2<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2(&mut FftPlanner::new(), &mut buf, h, w, false);
    buf
}
