//! Box geometry: IoU, NMS, the standard center/log-size delta transform used by
//! the first detection stage, and the boundary-area parameterization used by
//! every refinement stage.
//!
//! All values here are `f64`. Refinement works on four flank regions
//! ("boundary areas") centered on the sides of a box. Each side's displacement
//! toward the target is expressed relative to the area's center line, in units of
//! the area's extent (`c·w` for left/right, `c·h` for up/bottom).

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("degenerate boundary area: extent {extent} along {axis}")]
    DegenerateArea { axis: &'static str, extent: f64 },
}

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;
    fn try_from(v: [f64; 4]) -> Result<Self, GeomError> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeomError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GeomError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn to_array(&self) -> [f64; 4] {
        (*self).into()
    }

    /// True when the box lies within `[0,w]×[0,h]`.
    pub fn inside(&self, img_w: f64, img_h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= img_w && self.y2 <= img_h
    }
}

/// One of the four box sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Up,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Up, Side::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Up => "up",
            Side::Bottom => "bottom",
        }
    }

    /// Left/right boundaries are vertical lines.
    pub fn is_vertical(self) -> bool {
        matches!(self, Side::Left | Side::Right)
    }
}

/// Relative side displacements `(l, r, u, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sigma {
    pub l: f64,
    pub r: f64,
    pub u: f64,
    pub b: f64,
}

impl Sigma {
    pub fn new(l: f64, r: f64, u: f64, b: f64) -> Self {
        Sigma { l, r, u, b }
    }

    pub fn get(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.l,
            Side::Right => self.r,
            Side::Up => self.u,
            Side::Bottom => self.b,
        }
    }

    pub fn set(&mut self, side: Side, v: f64) {
        match side {
            Side::Left => self.l = v,
            Side::Right => self.r = v,
            Side::Up => self.u = v,
            Side::Bottom => self.b = v,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.l, self.r, self.u, self.b]
    }

    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// The four flank regions of a box plus their realized center lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryAreas {
    pub left: BBox,
    pub right: BBox,
    pub up: BBox,
    pub bottom: BBox,
    pub m_l: f64,
    pub m_r: f64,
    pub m_u: f64,
    pub m_b: f64,
    pub img_w: f64,
    pub img_h: f64,
    /// Per side (l, r, u, b): whether the area was slid inward at an image edge.
    pub truncated: [bool; 4],
}

impl BoundaryAreas {
    pub fn area(&self, side: Side) -> BBox {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
            Side::Up => self.up,
            Side::Bottom => self.bottom,
        }
    }

    pub fn center_line(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.m_l,
            Side::Right => self.m_r,
            Side::Up => self.m_u,
            Side::Bottom => self.m_b,
        }
    }
}

/// Per-stage refinement settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Total stage count including the first (non-refining) stage.
    pub num_stages: usize,
    /// Target/prediction clamp; `None` disables clamping.
    pub clamp_q: Option<f64>,
    /// Shrink factor used by refinement stages 2..=T, one entry each.
    pub schedule: Vec<f64>,
    /// Divisor applied to predicted and target sigma inside the refinement loss.
    pub side_norm: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig::with_stages(3)
    }
}

impl RefineConfig {
    /// Halving schedule `c = 1/2^t` for `t = 1..T-1`, `q = 0.5`, `η = 0.2`.
    pub fn with_stages(num_stages: usize) -> Self {
        let schedule = (1..num_stages.max(1)).map(|t| shrink_factor(t).unwrap_or(1.0)).collect();
        RefineConfig { num_stages, clamp_q: Some(0.5), schedule, side_norm: 0.2 }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.num_stages < 1 {
            return Err(GeomError::InvalidArgument("num_stages must be >= 1".into()));
        }
        if self.schedule.len() != self.num_stages - 1 {
            return Err(GeomError::InvalidArgument(format!(
                "schedule has {} entries, expected num_stages-1 = {}",
                self.schedule.len(),
                self.num_stages - 1
            )));
        }
        if let Some(c) = self.schedule.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(GeomError::InvalidArgument(format!("shrink factor {c} outside (0, 1]")));
        }
        if let Some(q) = self.clamp_q {
            if !(q > 0.0 && q.is_finite()) {
                return Err(GeomError::InvalidArgument(format!("clamp q must be > 0, got {q}")));
            }
        }
        if !(self.side_norm > 0.0 && self.side_norm.is_finite()) {
            return Err(GeomError::InvalidArgument("side_norm must be > 0".into()));
        }
        Ok(())
    }

    /// Shrink factor for refinement stage `t` (1-based over refinement stages).
    pub fn shrink(&self, t: usize) -> Result<f64, GeomError> {
        if t < 1 || t > self.schedule.len() {
            return Err(GeomError::InvalidArgument(format!("no refinement stage {t}")));
        }
        Ok(self.schedule[t - 1])
    }
}

/// Boundary-area shrink factor `1/2^t` for refinement stage `t ≥ 1`.
pub fn shrink_factor(t: usize) -> Result<f64, GeomError> {
    if t < 1 {
        return Err(GeomError::InvalidArgument(format!("stage index must be >= 1, got {t}")));
    }
    Ok(0.5_f64.powi(t as i32))
}

/// Places an interval of length `len` centered at `center` inside `[0, limit]`,
/// sliding it inward when it crosses an edge. Returns (lo, hi, slid).
fn place_interval(center: f64, len: f64, limit: f64) -> (f64, f64, bool) {
    let lo = center - 0.5 * len;
    let hi = center + 0.5 * len;
    if lo < 0.0 {
        (0.0, len, true)
    } else if hi > limit {
        (limit - len, limit, true)
    } else {
        (lo, hi, false)
    }
}

pub fn boundary_areas(bbox: &BBox, c: f64, img_w: f64, img_h: f64) -> Result<BoundaryAreas, GeomError> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(GeomError::InvalidArgument(format!("shrink factor {c} outside (0, 1]")));
    }
    let cw = c * bbox.width();
    let ch = c * bbox.height();
    if cw <= EPS {
        return Err(GeomError::DegenerateArea { axis: "x", extent: cw });
    }
    if ch <= EPS {
        return Err(GeomError::DegenerateArea { axis: "y", extent: ch });
    }
    let (l0, l1, tl) = place_interval(bbox.x1, cw, img_w);
    let (r0, r1, tr) = place_interval(bbox.x2, cw, img_w);
    let (u0, u1, tu) = place_interval(bbox.y1, ch, img_h);
    let (b0, b1, tb) = place_interval(bbox.y2, ch, img_h);
    Ok(BoundaryAreas {
        left: BBox::new(l0, bbox.y1, l1, bbox.y2)?,
        right: BBox::new(r0, bbox.y1, r1, bbox.y2)?,
        up: BBox::new(bbox.x1, u0, bbox.x2, u1)?,
        bottom: BBox::new(bbox.x1, b0, bbox.x2, b1)?,
        m_l: 0.5 * (l0 + l1),
        m_r: 0.5 * (r0 + r1),
        m_u: 0.5 * (u0 + u1),
        m_b: 0.5 * (b0 + b1),
        img_w,
        img_h,
        truncated: [tl, tr, tu, tb],
    })
}

fn area_units(bbox: &BBox, c: f64) -> Result<(f64, f64), GeomError> {
    let (w, h) = (bbox.width(), bbox.height());
    if !(w > EPS && h > EPS) {
        return Err(GeomError::DegenerateBox { x1: bbox.x1, y1: bbox.y1, x2: bbox.x2, y2: bbox.y2 });
    }
    if !(c > 0.0) {
        return Err(GeomError::InvalidArgument(format!("shrink factor must be > 0, got {c}")));
    }
    Ok((c * w, c * h))
}

/// Displacement of each target side from the matching center line, in area units.
pub fn encode_sigma(areas: &BoundaryAreas, bbox: &BBox, c: f64, target: &BBox) -> Result<Sigma, GeomError> {
    let (cw, ch) = area_units(bbox, c)?;
    Ok(Sigma {
        l: (target.x1 - areas.m_l) / cw,
        r: (target.x2 - areas.m_r) / cw,
        u: (target.y1 - areas.m_u) / ch,
        b: (target.y2 - areas.m_b) / ch,
    })
}

/// Componentwise clamp to `[-q, q]` plus which components were clipped (l, r, u, b).
pub fn clamp_sigma(sigma: &Sigma, q: f64) -> (Sigma, [bool; 4]) {
    let mut out = *sigma;
    let mut clipped = [false; 4];
    for (i, side) in Side::ALL.iter().enumerate() {
        let v = sigma.get(*side);
        let cv = v.clamp(-q, q);
        clipped[i] = cv != v;
        out.set(*side, cv);
    }
    (out, clipped)
}

/// Output of [`decode_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// Sides came out inverted and were swapped back into order.
    pub reordered: bool,
    /// Some coordinate fell outside the image and was clamped.
    pub clipped: bool,
}

/// Inverse of [`encode_sigma`], followed by reordering and clipping to the image.
pub fn decode_box(areas: &BoundaryAreas, bbox: &BBox, c: f64, sigma: &Sigma) -> Result<Decoded, GeomError> {
    let (cw, ch) = area_units(bbox, c)?;
    let x1 = areas.m_l + cw * sigma.l;
    let x2 = areas.m_r + cw * sigma.r;
    let y1 = areas.m_u + ch * sigma.u;
    let y2 = areas.m_b + ch * sigma.b;
    let reordered = x1 > x2 || y1 > y2;
    let (x1, x2) = (x1.min(x2), x1.max(x2));
    let (y1, y2) = (y1.min(y2), y1.max(y2));
    let cx1 = x1.clamp(0.0, areas.img_w);
    let cx2 = x2.clamp(0.0, areas.img_w);
    let cy1 = y1.clamp(0.0, areas.img_h);
    let cy2 = y2.clamp(0.0, areas.img_h);
    let clipped = cx1 != x1 || cx2 != x2 || cy1 != y1 || cy2 != y2;
    Ok(Decoded { bbox: BBox::new(cx1, cy1, cx2, cy2)?, reordered, clipped })
}

/// Normalization for the stage-1 delta transform: (center, size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaNorm {
    pub xy: f64,
    pub wh: f64,
}

impl Default for DeltaNorm {
    fn default() -> Self {
        DeltaNorm { xy: 0.1, wh: 0.2 }
    }
}

/// Largest log-scale change accepted by [`decode_delta`] (a 1000/16 size ratio).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

pub fn encode_delta(proposal: &BBox, target: &BBox, norm: DeltaNorm) -> Result<[f64; 4], GeomError> {
    if !(norm.xy > 0.0 && norm.wh > 0.0) {
        return Err(GeomError::InvalidArgument("delta normalization must be > 0".into()));
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    let (tw, th) = (target.width(), target.height());
    if !(pw > 0.0 && ph > 0.0 && tw > 0.0 && th > 0.0) {
        return Err(GeomError::InvalidArgument("non-positive box dimension".into()));
    }
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    Ok([
        (tcx - pcx) / pw / norm.xy,
        (tcy - pcy) / ph / norm.xy,
        (tw / pw).ln() / norm.wh,
        (th / ph).ln() / norm.wh,
    ])
}

pub fn decode_delta(proposal: &BBox, delta: &[f64; 4], norm: DeltaNorm) -> Result<BBox, GeomError> {
    if !(norm.xy > 0.0 && norm.wh > 0.0) {
        return Err(GeomError::InvalidArgument("delta normalization must be > 0".into()));
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    let (pcx, pcy) = proposal.center();
    let cx = pcx + delta[0] * norm.xy * pw;
    let cy = pcy + delta[1] * norm.xy * ph;
    let w = pw * (delta[2] * norm.wh).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ph * (delta[3] * norm.wh).clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn clip_to_image(bbox: &BBox, img_w: f64, img_h: f64) -> Result<BBox, GeomError> {
    BBox::new(
        bbox.x1.clamp(0.0, img_w),
        bbox.y1.clamp(0.0, img_h),
        bbox.x2.clamp(0.0, img_w),
        bbox.y2.clamp(0.0, img_h),
    )
}

/// A scored, categorized box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

fn by_score_desc(a: &Scored, b: &Scored) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Greedy per-category suppression. Returns indices into `dets`, highest score first.
pub fn nms_indices(dets: &[Scored], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort: equal scores keep input order
    order.sort_by(|&i, &j| by_score_desc(&dets[i], &dets[j]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep.iter().any(|&k| {
            dets[k].category == dets[i].category && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Scored], iou_thresh: f64) -> Vec<Scored> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn shrink_schedule() {
        assert_eq!(shrink_factor(1).unwrap(), 0.5);
        assert_eq!(shrink_factor(2).unwrap(), 0.25);
        assert_eq!(shrink_factor(10).unwrap(), 1.0 / 1024.0);
        assert!(shrink_factor(0).is_err());
        assert_eq!(RefineConfig::default().schedule, vec![0.5, 0.25]);
    }

    #[test]
    fn areas_interior_box() {
        let a = boundary_areas(&b(10., 20., 30., 60.), 0.5, 100., 100.).unwrap();
        assert_eq!(a.left, b(5., 20., 15., 60.));
        assert_eq!(a.right, b(25., 20., 35., 60.));
        assert_eq!(a.up, b(10., 10., 30., 30.));
        assert_eq!(a.bottom, b(10., 50., 30., 70.));
        assert_eq!((a.m_l, a.m_r, a.m_u, a.m_b), (10., 30., 20., 60.));
        assert_eq!(a.truncated, [false; 4]);
    }

    #[test]
    fn areas_truncated_left_edge() {
        let a = boundary_areas(&b(2., 20., 30., 60.), 0.5, 100., 100.).unwrap();
        assert_eq!(a.left, b(0., 20., 14., 60.));
        assert_eq!(a.m_l, 7.0);
        assert!(a.truncated[0]);
    }

    #[test]
    fn areas_truncated_far_edges() {
        let a = boundary_areas(&b(60., 70., 98., 99.), 0.5, 100., 100.).unwrap();
        assert!(close(a.right.x2, 100.) && close(a.right.width(), 19.));
        assert!(close(a.bottom.y2, 100.) && close(a.bottom.height(), 14.5));
        assert!(a.truncated[1] && a.truncated[3]);
    }

    #[test]
    fn areas_full_width_flank() {
        let a = boundary_areas(&b(10., 20., 30., 60.), 1.0, 100., 100.).unwrap();
        assert!(close(a.left.width(), 20.));
        assert!(close(a.m_l, 10.));
    }

    #[test]
    fn areas_reject_bad_shrink() {
        assert!(boundary_areas(&b(10., 20., 30., 60.), 0.0, 100., 100.).is_err());
        assert!(boundary_areas(&b(10., 20., 30., 60.), 1.5, 100., 100.).is_err());
        let tiny = b(10., 10., 10.0 + 1e-13, 20.);
        assert!(matches!(
            boundary_areas(&tiny, 0.5, 100., 100.),
            Err(GeomError::DegenerateArea { .. })
        ));
    }

    #[test]
    fn encode_examples() {
        let bx = b(10., 20., 30., 60.);
        let a = boundary_areas(&bx, 0.5, 100., 100.).unwrap();
        let s = encode_sigma(&a, &bx, 0.5, &b(12., 22., 28., 58.)).unwrap();
        assert!(close(s.l, 0.2) && close(s.r, -0.2) && close(s.u, 0.1) && close(s.b, -0.1));
        let z = encode_sigma(&a, &bx, 0.5, &bx).unwrap();
        assert_eq!(z, Sigma::default());

        let bx = b(2., 20., 30., 60.);
        let a = boundary_areas(&bx, 0.5, 100., 100.).unwrap();
        let s = encode_sigma(&a, &bx, 0.5, &b(4., 20., 30., 60.)).unwrap();
        assert!(close(s.l, -3.0 / 14.0));
    }

    #[test]
    fn clamp_examples() {
        let (s, f) = clamp_sigma(&Sigma::new(0.7, -0.3, 0.1, -0.9), 0.5);
        assert_eq!(s, Sigma::new(0.5, -0.3, 0.1, -0.5));
        assert_eq!(f, [true, false, false, true]);
        let inside = Sigma::new(0.1, -0.2, 0.3, -0.4);
        assert_eq!(clamp_sigma(&inside, 0.5).0, inside);
        assert_eq!(RefineConfig::default().clamp_q, Some(0.5));
    }

    #[test]
    fn decode_examples() {
        let bx = b(10., 20., 30., 60.);
        let a = boundary_areas(&bx, 0.5, 100., 100.).unwrap();
        let d = decode_box(&a, &bx, 0.5, &Sigma::new(0.2, -0.2, 0.1, -0.1)).unwrap();
        assert!(close(d.bbox.x1, 12.) && close(d.bbox.y1, 22.) && close(d.bbox.x2, 28.) && close(d.bbox.y2, 58.));
        let id = decode_box(&a, &bx, 0.5, &Sigma::default()).unwrap();
        assert_eq!(id.bbox, bx);
        assert!(!id.reordered && !id.clipped);
    }

    #[test]
    fn decode_reorders_inverted_sides() {
        let bx = b(10., 20., 30., 60.);
        let a = boundary_areas(&bx, 1.0, 100., 100.).unwrap();
        // left moves +1.5w, right moves -1.5w: sides cross
        let d = decode_box(&a, &bx, 1.0, &Sigma::new(1.5, -1.5, 0.0, 0.0)).unwrap();
        assert!(d.reordered);
        assert!(close(d.bbox.x1, 0.0) && close(d.bbox.x2, 40.0));
        // total collapse is an error
        let err = decode_box(&a, &bx, 1.0, &Sigma::new(0.5, -0.5, 0.0, 0.0));
        assert!(matches!(err, Err(GeomError::DegenerateBox { .. })));
    }

    #[test]
    fn decode_clips_to_image() {
        let bx = b(10., 20., 30., 60.);
        let a = boundary_areas(&bx, 0.5, 100., 100.).unwrap();
        let d = decode_box(&a, &bx, 0.5, &Sigma::new(-2.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(d.clipped);
        assert_eq!(d.bbox.x1, 0.0);
    }

    #[test]
    fn delta_examples() {
        let p = b(0., 0., 10., 10.);
        assert_eq!(encode_delta(&p, &p, DeltaNorm::default()).unwrap(), [0.0; 4]);
        let d = encode_delta(&p, &b(1., 0., 11., 10.), DeltaNorm::default()).unwrap();
        assert!(close(d[0], 1.0) && d[1] == 0.0 && d[2] == 0.0 && d[3] == 0.0);
        let g = b(3., -2., 17., 9.);
        let back = decode_delta(&p, &encode_delta(&p, &g, DeltaNorm::default()).unwrap(), DeltaNorm::default()).unwrap();
        assert!(close(back.x1, g.x1) && close(back.y1, g.y1) && close(back.x2, g.x2) && close(back.y2, g.y2));
        assert!(encode_delta(&p, &p, DeltaNorm { xy: 0.0, wh: 0.2 }).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(iou(&a, &a), 1.0);
        assert!(close(iou(&a, &b(5., 5., 15., 15.)), 1.0 / 7.0));
        assert_eq!(iou(&a, &b(20., 20., 30., 30.)), 0.0);
        assert_eq!(iou(&a, &b(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn clip_examples() {
        let a = b(5., 5., 20., 20.);
        assert_eq!(clip_to_image(&a, 100., 100.).unwrap(), a);
        assert_eq!(clip_to_image(&b(-5., 0., 10., 10.), 100., 100.).unwrap(), b(0., 0., 10., 10.));
        assert!(clip_to_image(&b(-5., -5., -1., -1.), 100., 100.).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = b(0., 0., 10., 10.);
        let dets = [
            Scored { bbox: a, score: 0.8, category: 0 },
            Scored { bbox: a, score: 0.9, category: 0 },
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let disjoint = [
            Scored { bbox: a, score: 0.5, category: 0 },
            Scored { bbox: b(20., 20., 30., 30.), score: 0.6, category: 0 },
            Scored { bbox: a, score: 0.4, category: 1 },
        ];
        assert_eq!(nms(&disjoint, 0.5).len(), 3);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn bbox_serde_as_array() {
        let a = b(1.5, 2., 3., 4.25);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[1.5,2.0,3.0,4.25]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), a);
        assert!(serde_json::from_str::<BBox>("[3,0,1,1]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_translation_invariant(a in arb_box(), c in arb_box(), dx in -16i32..16, dy in -16i32..16) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
            let (dx, dy) = (dx as f64 * 0.25, dy as f64 * 0.25);
            let moved = iou(&a.translate(dx, dy), &c.translate(dx, dy));
            prop_assert!((moved - iou(&a, &c)).abs() < 1e-12);
        }

        #[test]
        fn clamp_idempotent_and_monotone(v in -3.0..3.0f64, w in -3.0..3.0f64, q in 0.05..2.0f64) {
            let s = Sigma::new(v, w, -v, -w);
            let (once, _) = clamp_sigma(&s, q);
            let (twice, flags) = clamp_sigma(&once, q);
            prop_assert_eq!(once, twice);
            prop_assert_eq!(flags, [false; 4]);
            let (lo, hi) = if v <= w { (v, w) } else { (w, v) };
            let a = clamp_sigma(&Sigma::new(lo, 0., 0., 0.), q).0.l;
            let c = clamp_sigma(&Sigma::new(hi, 0., 0., 0.), q).0.l;
            prop_assert!(a <= c);
        }

        #[test]
        fn nms_is_a_fixed_point(boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64, 0usize..2), 0..12)) {
            let dets: Vec<Scored> = boxes.into_iter().map(|(bbox, score, category)| Scored { bbox, score, category }).collect();
            let once = nms(&dets, 0.5);
            let twice = nms(&once, 0.5);
            prop_assert_eq!(&once, &twice);
            for i in 0..once.len() {
                for j in (i + 1)..once.len() {
                    prop_assert!(once[i].score >= once[j].score);
                    if once[i].category == once[j].category {
                        prop_assert!(iou(&once[i].bbox, &once[j].bbox) <= 0.5);
                    }
                }
            }
        }

        #[test]
        fn delta_round_trip(p in arb_box(), g in arb_box()) {
            let n = DeltaNorm::default();
            let back = decode_delta(&p, &encode_delta(&p, &g, n).unwrap(), n).unwrap();
            prop_assert!((back.x1 - g.x1).abs() < 1e-9 && (back.y2 - g.y2).abs() < 1e-9);
        }
    }
}
