//! Slice-level compute kernels behind the graph operations.
//!
//! Everything here works on raw channel-last buffers and knows nothing about
//! autograd. Loops that write disjoint output regions go through [`crate::par`].

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};
use crate::par;

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so the output has `ceil(in / stride)` cells per axis.
    Same,
    Valid,
}

fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Resolved geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: (usize, usize), padding: Padding) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::invalid_shape("conv2d", format!("input must be N×H×W×C, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::invalid_shape("conv2d", format!("kernel must be kh×kw×Cin×Cout, got {kernel:?}")));
        }
        let (n, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape("conv2d channels", input, kernel));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                if sh == 1 && sw == 1 && (kh % 2 == 0 || kw % 2 == 0) {
                    return Err(Error::invalid_shape("conv2d", "same padding needs odd kernels"));
                }
                let (ho, pt) = same_padding(h, kh, sh);
                let (wo, pl) = same_padding(w, kw, sw);
                (ho, wo, pt, pl)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::invalid_shape(
                        "conv2d",
                        format!("valid padding needs input {h}×{w} ≥ kernel {kh}×{kw}"),
                    ));
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh,
            sw,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.cout]
    }

    /// A 1×1 stride-1 convolution reads the input buffer directly as its patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds input patches into a `(N·Ho·Wo) × (kh·kw·Cin)` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.out_rows() * pl];
    par::for_each_chunk_mut(&mut cols, g.wo * pl, |row, chunk| {
        let b = row / g.ho;
        let oy = row % g.ho;
        for ox in 0..g.wo {
            let patch = &mut chunk[ox * pl..(ox + 1) * pl];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, g.sh, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.source(ox, kx, g.sw, g.pad_left, g.w) else { continue };
                    let src = ((b * g.h + iy) * g.w + ix) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    patch[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    });
    cols
}

/// Folds patch gradients back onto the input, summing overlapping taps.
pub fn col2im<T: Scalar>(g: &ConvGeom, dcols: &[T]) -> Vec<T> {
    let pl = g.patch_len();
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let per_sample = g.h * g.w * g.cin;
    par::for_each_chunk_mut(&mut dx, per_sample, |b, dxs| {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (b * g.ho + oy) * g.wo + ox;
                let patch = &dcols[row * pl..(row + 1) * pl];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.sh, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.sw, g.pad_left, g.w) else { continue };
                        let dst = (iy * g.w + ix) * g.cin;
                        let src = (ky * g.kw + kx) * g.cin;
                        for (d, s) in dxs[dst..dst + g.cin].iter_mut().zip(&patch[src..src + g.cin]) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Convolution forward: `out = im2col(x) · K + bias`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let rows = g.out_rows();
    let mut out = vec![T::zero(); rows * g.cout];
    let beta = match bias {
        Some(b) => {
            for row in out.chunks_mut(g.cout) {
                row.copy_from_slice(b);
            }
            T::one()
        }
        None => T::zero(),
    };
    if g.is_pointwise() {
        T::gemm(rows, g.cin, g.cout, x, false, kernel, false, &mut out, beta);
    } else {
        let cols = im2col(g, x);
        T::gemm(rows, g.patch_len(), g.cout, &cols, false, kernel, false, &mut out, beta);
    }
    out
}

/// Gradients of a convolution: `(dx, dkernel, dbias)`.
pub fn conv2d_backward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], dout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.out_rows();
    let pl = g.patch_len();
    let mut dk = vec![T::zero(); pl * g.cout];
    let mut dcols = vec![T::zero(); rows * pl];
    if g.is_pointwise() {
        T::gemm(pl, rows, g.cout, x, true, dout, false, &mut dk, T::zero());
    } else {
        let cols = im2col(g, x);
        T::gemm(pl, rows, g.cout, &cols, true, dout, false, &mut dk, T::zero());
    }
    T::gemm(rows, g.cout, pl, dout, false, kernel, true, &mut dcols, T::zero());
    let dx = if g.is_pointwise() { dcols } else { col2im(g, &dcols) };
    let mut db = vec![T::zero(); g.cout];
    for row in dout.chunks(g.cout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d = *d + *v;
        }
    }
    (dx, dk, db)
}

/// Resolved geometry of a pooling window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    fn check(input: &[usize], pool: (usize, usize), stride: (usize, usize)) -> Result<()> {
        if input.len() != 4 {
            return Err(Error::invalid_shape("pool2d", format!("input must be N×H×W×C, got {input:?}")));
        }
        if pool.0 == 0 || pool.1 == 0 {
            return Err(Error::InvalidArgument("pooling window must be non-empty".into()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("pooling stride must be positive".into()));
        }
        Ok(())
    }

    /// Unpadded sweep; `ceil_mode` keeps a trailing partial window.
    pub fn windowed(input: &[usize], pool: (usize, usize), stride: (usize, usize), ceil_mode: bool) -> Result<Self> {
        Self::check(input, pool, stride)?;
        let (h, w) = (input[1], input[2]);
        if pool.0 > h || pool.1 > w {
            return Err(Error::invalid_shape(
                "pool2d",
                format!("window {}×{} larger than input {h}×{w}", pool.0, pool.1),
            ));
        }
        let count = |extent: usize, k: usize, s: usize| {
            let span = extent - k;
            if ceil_mode {
                let c = span.div_ceil(s) + 1;
                // A trailing window must start inside the input.
                if (c - 1) * s >= extent {
                    c - 1
                } else {
                    c
                }
            } else {
                span / s + 1
            }
        };
        Ok(PoolGeom {
            n: input[0],
            h,
            w,
            c: input[3],
            ph: pool.0,
            pw: pool.1,
            sh: stride.0,
            sw: stride.1,
            pad_top: 0,
            pad_left: 0,
            ho: count(h, pool.0, stride.0),
            wo: count(w, pool.1, stride.1),
        })
    }

    /// Same-padded sweep with `ceil(in / stride)` outputs; padding is never a window member.
    pub fn same(input: &[usize], pool: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        Self::check(input, pool, stride)?;
        let (ho, pt) = same_padding(input[1], pool.0, stride.0);
        let (wo, pl) = same_padding(input[2], pool.1, stride.1);
        Ok(PoolGeom {
            n: input[0],
            h: input[1],
            w: input[2],
            c: input[3],
            ph: pool.0,
            pw: pool.1,
            sh: stride.0,
            sw: stride.1,
            pad_top: pt,
            pad_left: pl,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.c]
    }

    /// Valid input range `[start, end)` covered by output index `o` along one axis.
    #[inline]
    fn span(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
        let start = (o * stride) as isize - pad as isize;
        let end = (start + k as isize).min(extent as isize);
        (start.max(0) as usize, end.max(0) as usize)
    }

    #[inline]
    fn rows(&self, oy: usize) -> (usize, usize) {
        Self::span(oy, self.sh, self.pad_top, self.ph, self.h)
    }

    #[inline]
    fn cols(&self, ox: usize) -> (usize, usize) {
        Self::span(ox, self.sw, self.pad_left, self.pw, self.w)
    }
}

/// Mean over the valid members of each window.
pub fn avgpool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.ho * g.wo * g.c];
    par::for_each_chunk_mut(&mut out, g.wo * g.c, |row, chunk| {
        let b = row / g.ho;
        let (y0, y1) = g.rows(row % g.ho);
        for ox in 0..g.wo {
            let (x0, x1) = g.cols(ox);
            let cell = &mut chunk[ox * g.c..(ox + 1) * g.c];
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let src = ((b * g.h + iy) * g.w + ix) * g.c;
                    for (o, v) in cell.iter_mut().zip(&x[src..src + g.c]) {
                        *o = *o + *v;
                    }
                }
            }
            let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
            for o in cell.iter_mut() {
                *o = *o / count;
            }
        }
    });
    out
}

pub fn avgpool_backward<T: Scalar>(g: &PoolGeom, dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c];
    par::for_each_chunk_mut(&mut dx, g.h * g.w * g.c, |b, dxs| {
        for oy in 0..g.ho {
            let (y0, y1) = g.rows(oy);
            for ox in 0..g.wo {
                let (x0, x1) = g.cols(ox);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let src = ((b * g.ho + oy) * g.wo + ox) * g.c;
                let grad = &dout[src..src + g.c];
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let dst = (iy * g.w + ix) * g.c;
                        for (d, v) in dxs[dst..dst + g.c].iter_mut().zip(grad) {
                            *d = *d + *v / count;
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Window maxima and the flat input index that produced each.
pub fn maxpool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let total = g.n * g.ho * g.wo * g.c;
    let mut out = vec![T::zero(); total];
    let mut arg = vec![0usize; total];
    par::for_each_chunk_mut(&mut arg, g.wo * g.c, |row, chunk| {
        let b = row / g.ho;
        let (y0, y1) = g.rows(row % g.ho);
        for ox in 0..g.wo {
            let (x0, x1) = g.cols(ox);
            for ch in 0..g.c {
                let mut best = usize::MAX;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = ((b * g.h + iy) * g.w + ix) * g.c + ch;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                chunk[ox * g.c + ch] = best;
            }
        }
    });
    for (o, &i) in out.iter_mut().zip(&arg) {
        *o = x[i];
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(g: &PoolGeom, argmax: &[usize], dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c];
    for (&i, &d) in argmax.iter().zip(dout) {
        dx[i] = dx[i] + d;
    }
    dx
}

/// Per-axis bilinear sampling table with half-pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTable {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            lo.push(i0);
            hi.push((i0 + 1).min(src - 1));
            frac.push(s - i0 as f64);
        }
        AxisTable { lo, hi, frac }
    }
}

/// Geometry of a bilinear resize of `N×h×w×C` to `N×H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizeGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub rows: AxisTable,
    pub cols: AxisTable,
}

impl ResizeGeom {
    pub fn new(input: &[usize], target: (usize, usize)) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::invalid_shape("resize", format!("input must be N×H×W×C, got {input:?}")));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidArgument("resize target must be non-empty".into()));
        }
        Ok(ResizeGeom {
            n: input[0],
            h: input[1],
            w: input[2],
            c: input[3],
            out_h: target.0,
            out_w: target.1,
            rows: AxisTable::new(input[1], target.0),
            cols: AxisTable::new(input[2], target.1),
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.out_h, self.out_w, self.c]
    }
}

pub fn resize_forward<T: Scalar>(g: &ResizeGeom, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * g.c];
    par::for_each_chunk_mut(&mut out, g.out_w * g.c, |row, chunk| {
        let b = row / g.out_h;
        let oy = row % g.out_h;
        let fy = T::from_f64_lossy(g.rows.frac[oy]);
        let base = b * g.h;
        for ox in 0..g.out_w {
            let fx = T::from_f64_lossy(g.cols.frac[ox]);
            let at = |iy: usize, ix: usize| ((base + iy) * g.w + ix) * g.c;
            let (a, bb) = (at(g.rows.lo[oy], g.cols.lo[ox]), at(g.rows.lo[oy], g.cols.hi[ox]));
            let (cc, d) = (at(g.rows.hi[oy], g.cols.lo[ox]), at(g.rows.hi[oy], g.cols.hi[ox]));
            for ch in 0..g.c {
                let top = x[a + ch] + (x[bb + ch] - x[a + ch]) * fx;
                let bot = x[cc + ch] + (x[d + ch] - x[cc + ch]) * fx;
                chunk[ox * g.c + ch] = top + (bot - top) * fy;
            }
        }
    });
    out
}

pub fn resize_backward<T: Scalar>(g: &ResizeGeom, dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.c];
    par::for_each_chunk_mut(&mut dx, g.h * g.w * g.c, |b, dxs| {
        let one = T::one();
        for oy in 0..g.out_h {
            let fy = T::from_f64_lossy(g.rows.frac[oy]);
            for ox in 0..g.out_w {
                let fx = T::from_f64_lossy(g.cols.frac[ox]);
                let src = ((b * g.out_h + oy) * g.out_w + ox) * g.c;
                let taps = [
                    (g.rows.lo[oy], g.cols.lo[ox], (one - fy) * (one - fx)),
                    (g.rows.lo[oy], g.cols.hi[ox], (one - fy) * fx),
                    (g.rows.hi[oy], g.cols.lo[ox], fy * (one - fx)),
                    (g.rows.hi[oy], g.cols.hi[ox], fy * fx),
                ];
                for (iy, ix, wgt) in taps {
                    let dst = (iy * g.w + ix) * g.c;
                    for ch in 0..g.c {
                        dxs[dst + ch] = dxs[dst + ch] + dout[src + ch] * wgt;
                    }
                }
            }
        }
    });
    dx
}
