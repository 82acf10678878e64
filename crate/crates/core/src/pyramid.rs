//! Feature pyramid levels, scale-based level assignment, per-stage level
//! demotion and bilinear RoI Align.
//!
//! Coordinates: feature cell `(i, j)` of a level with stride `s` sits at image
//! position `(j·s, i·s)`. Boxes map to feature space by plain division by the
//! stride; no half-pixel offset is applied.

use crate::boxgeom::BBox;
use crate::tensor::{RoiTaps, Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 5;
pub const NUM_LEVELS: usize = MAX_LEVEL - MIN_LEVEL + 1;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("pyramid level {0} outside [{MIN_LEVEL}, {MAX_LEVEL}]")]
    LevelOutOfRange(usize),
    #[error("degenerate box ({0:?})")]
    DegenerateBox([f64; 4]),
    #[error("invalid pyramid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn stride_of(level: usize) -> usize {
    1 << level
}

/// Per-level feature maps `L2..L5`, each `[d, H_k, W_k]` with stride `2^k`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar = f32> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<Tensor<T>>, img_w: usize, img_h: usize) -> Result<Self, PyramidError> {
        if levels.len() != NUM_LEVELS {
            return Err(PyramidError::Invalid(format!("expected {NUM_LEVELS} levels, got {}", levels.len())));
        }
        let d = levels[0].shape().first().copied().unwrap_or(0);
        for (i, t) in levels.iter().enumerate() {
            let s = stride_of(MIN_LEVEL + i);
            let want = [d, img_h.div_ceil(s), img_w.div_ceil(s)];
            if t.shape() != want {
                return Err(PyramidError::Invalid(format!(
                    "level {} has shape {:?}, expected {want:?}",
                    MIN_LEVEL + i,
                    t.shape()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn level(&self, k: usize) -> Result<&Tensor<T>, PyramidError> {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&k) {
            return Err(PyramidError::LevelOutOfRange(k));
        }
        Ok(&self.levels[k - MIN_LEVEL])
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

/// Canonical-scale level assignment `k = ⌊k0 + log2(√(wh)/s0)⌋`, clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelAssignment {
    pub k0: usize,
    pub s0: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for LevelAssignment {
    /// Small canonical scale suited to 128-pixel images.
    fn default() -> Self {
        LevelAssignment { k0: 2, s0: 32.0, k_min: MIN_LEVEL, k_max: MAX_LEVEL }
    }
}

impl LevelAssignment {
    /// Canonical scale used by ImageNet-sized backbones.
    pub fn large_images() -> Self {
        LevelAssignment { k0: 4, s0: 224.0, k_min: MIN_LEVEL, k_max: MAX_LEVEL }
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        let ok = MIN_LEVEL <= self.k_min
            && self.k_min <= self.k0
            && self.k0 <= self.k_max
            && self.k_max <= MAX_LEVEL
            && self.s0 > 0.0;
        if !ok {
            return Err(PyramidError::Invalid(format!("bad level assignment {self:?}")));
        }
        Ok(())
    }
}

pub fn assign_level(bbox: &BBox, a: &LevelAssignment) -> Result<usize, PyramidError> {
    let area = bbox.area();
    if !(area > 0.0 && area.is_finite()) {
        return Err(PyramidError::DegenerateBox(bbox.to_array()));
    }
    let k = (a.k0 as f64 + (area.sqrt() / a.s0).log2()).floor();
    Ok(k.clamp(a.k_min as f64, a.k_max as f64) as usize)
}

/// Level used by the next refinement stage: one finer, never below `L2`.
pub fn refine_level(level: usize) -> Result<usize, PyramidError> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        return Err(PyramidError::LevelOutOfRange(level));
    }
    Ok((level - 1).max(MIN_LEVEL))
}

/// Pooling grid: `out×out` bins with `sampling×sampling` points each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSpec {
    pub out: usize,
    pub sampling: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec { out: 7, sampling: 2 }
    }
}

/// Bilinear taps of every output bin of `bbox` on an `h×w` map with `stride`.
/// Out-of-map neighbours are dropped (zero padding).
pub fn roi_bin_taps<T: Scalar>(
    bbox: &BBox,
    stride: f64,
    h: usize,
    w: usize,
    pool: PoolSpec,
) -> Result<Vec<Vec<(usize, T)>>, PyramidError> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(PyramidError::DegenerateBox(bbox.to_array()));
    }
    if pool.out == 0 || pool.sampling == 0 || !(stride > 0.0) {
        return Err(PyramidError::Invalid(format!("bad pooling {pool:?} / stride {stride}")));
    }
    let (k, s) = (pool.out, pool.sampling);
    let x0 = bbox.x1 / stride;
    let y0 = bbox.y1 / stride;
    let bw = bbox.width() / stride / k as f64;
    let bh = bbox.height() / stride / k as f64;
    let norm = 1.0 / (s * s) as f64;
    let mut bins = Vec::with_capacity(k * k);
    for by in 0..k {
        for bx in 0..k {
            let mut taps: Vec<(usize, T)> = Vec::with_capacity(4 * s * s);
            for sy in 0..s {
                let fy = y0 + (by as f64 + (sy as f64 + 0.5) / s as f64) * bh;
                for sx in 0..s {
                    let fx = x0 + (bx as f64 + (sx as f64 + 0.5) / s as f64) * bw;
                    let (ix, iy) = (fx.floor(), fy.floor());
                    let (lx, ly) = (fx - ix, fy - iy);
                    let corners = [
                        (iy, ix, (1.0 - ly) * (1.0 - lx)),
                        (iy, ix + 1.0, (1.0 - ly) * lx),
                        (iy + 1.0, ix, ly * (1.0 - lx)),
                        (iy + 1.0, ix + 1.0, ly * lx),
                    ];
                    for (cy, cx, wgt) in corners {
                        if wgt == 0.0 || cy < 0.0 || cx < 0.0 || cy >= h as f64 || cx >= w as f64 {
                            continue;
                        }
                        taps.push((cy as usize * w + cx as usize, T::of(wgt * norm)));
                    }
                }
            }
            bins.push(taps);
        }
    }
    Ok(bins)
}

/// Appends `bbox` (belonging to batch item `batch`) to a tap table.
pub fn push_roi<T: Scalar>(
    taps: &mut RoiTaps<T>,
    batch: usize,
    bbox: &BBox,
    level: usize,
    map_hw: (usize, usize),
    pool: PoolSpec,
) -> Result<(), PyramidError> {
    let bins = roi_bin_taps(bbox, stride_of(level) as f64, map_hw.0, map_hw.1, pool)?;
    taps.push_roi(batch, bins);
    Ok(())
}

/// Pools one box from a `[d, H, W]` level into `[d, out, out]`.
pub fn roi_align<T: Scalar>(level: &Tensor<T>, bbox: &BBox, stride: usize, pool: PoolSpec) -> Result<Tensor<T>, PyramidError> {
    let s = level.shape();
    if s.len() != 3 {
        return Err(PyramidError::Invalid(format!("expected [d,H,W] level, got {s:?}")));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let bins = roi_bin_taps::<T>(bbox, stride as f64, h, w, pool)?;
    let data = level.data();
    let mut out = Vec::with_capacity(d * bins.len());
    for c in 0..d {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for taps in &bins {
            out.push(taps.iter().map(|(i, wgt)| *wgt * plane[*i]).sum::<T>());
        }
    }
    Ok(Tensor::new(vec![d, pool.out, pool.out], out)?)
}
