//! im2col lowering for grouped 2-D convolution.

use super::{Result, Scalar, TensorError};

/// Stride, zero padding and group count of a convolution. Kernel extents come
/// from the weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// 3×3, stride 1, pad 1.
    pub const SAME3: ConvSpec = ConvSpec { stride: (1, 1), pad: (1, 1), groups: 1 };
    /// 3×3, stride 2, pad 1.
    pub const DOWN3: ConvSpec = ConvSpec { stride: (2, 2), pad: (1, 1), groups: 1 };
    /// 1×1 pointwise.
    pub const POINT: ConvSpec = ConvSpec { stride: (1, 1), pad: (0, 0), groups: 1 };
    /// 1×3 along the last axis, pad 1 on that axis only.
    pub const ROW3: ConvSpec = ConvSpec { stride: (1, 1), pad: (0, 1), groups: 1 };

    pub fn grouped(self, groups: usize) -> Self {
        ConvSpec { groups, ..self }
    }
}

/// Resolved extents of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], spec: ConvSpec) -> Result<Self> {
        let mismatch = || TensorError::Shape { op: "conv2d", left: x.to_vec(), right: wt.to_vec() };
        if x.len() != 4 || wt.len() != 4 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        let g = spec.groups;
        if g == 0 || c % g != 0 || o % g != 0 || cg != c / g {
            return Err(mismatch());
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || h + 2 * spec.pad.0 < kh || w + 2 * spec.pad.1 < kw {
            return Err(TensorError::Invalid { op: "conv2d", msg: format!("kernel {kh}x{kw} does not fit input {h}x{w}") });
        }
        let ho = (h + 2 * spec.pad.0 - kh) / spec.stride.0 + 1;
        let wo = (w + 2 * spec.pad.1 - kw) / spec.stride.1 + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.pad.0,
            pw: spec.pad.1,
            groups: g,
            ho,
            wo,
        })
    }

    /// Rows of one group's column matrix.
    pub fn group_rows(&self) -> usize {
        self.c / self.groups * self.kh * self.kw
    }

    /// Columns of the column matrix (all images).
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, stride: usize, limit: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Lays out `x` as `[C·KH·KW, N·HO·WO]`; group `g` occupies rows
/// `g·group_rows .. (g+1)·group_rows`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * ncols];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ki, g.ph, g.sh, g.h) else { continue };
                        let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                        let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, v) in d.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kj, g.pw, g.sw, g.w) {
                                *v = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients into `dx`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    let hw_out = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + ci) * g.h * g.w..(n * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, ki, g.ph, g.sh, g.h) else { continue };
                        let s = &src[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, v) in s.iter().enumerate() {
                            if let Some(ix) = g.src(ox, kj, g.pw, g.sw, g.w) {
                                plane[iy * g.w + ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}
