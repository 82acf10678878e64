//! Straight-line reference implementations, written without the tensor engine
//! or the tap tables, used to cross-check the fast paths.

use crate::boxgeom::{iou, BBox, Side};
use crate::bpn::{BpnConfig, SideNet};
use crate::evalkit::{AreaRange, ImageEval, IOU_THRESHOLDS};
use crate::nn::{Conv2d, Linear};
use crate::tensor::{ParamId, ParamStore};

fn values(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().iter().map(|v| *v as f64).collect()
}

/// Bilinear read of `map[h×w]` at continuous `(x, y)`, zero outside the map.
pub fn bilinear(map: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let at = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            map[yy as usize * w + xx as usize]
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    at(yi, xi) * (1.0 - fx) * (1.0 - fy)
        + at(yi, xi + 1) * fx * (1.0 - fy)
        + at(yi + 1, xi) * (1.0 - fx) * fy
        + at(yi + 1, xi + 1) * fx * fy
}

/// RoI Align of `level: [d, h, w]` over `bbox` (image pixels) into `[d, out, out]`.
pub fn roi_align(level: &[f64], d: usize, h: usize, w: usize, bbox: &BBox, stride: f64, out: usize, sampling: usize) -> Vec<f64> {
    let bw = bbox.width() / stride / out as f64;
    let bh = bbox.height() / stride / out as f64;
    let mut res = Vec::with_capacity(d * out * out);
    for c in 0..d {
        let map = &level[c * h * w..(c + 1) * h * w];
        for by in 0..out {
            for bx in 0..out {
                let mut acc = 0.0;
                for sy in 0..sampling {
                    for sx in 0..sampling {
                        let x = bbox.x1 / stride + bw * (bx as f64 + (sx as f64 + 0.5) / sampling as f64);
                        let y = bbox.y1 / stride + bh * (by as f64 + (sy as f64 + 0.5) / sampling as f64);
                        acc += bilinear(map, h, w, x, y);
                    }
                }
                res.push(acc / (sampling * sampling) as f64);
            }
        }
    }
    res
}

/// Feature map `[c, h, w]` in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: i64, x: i64) -> f64 {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            0.0
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// Direct grouped convolution.
pub fn conv(x: &Map, store: &ParamStore, layer: &Conv2d) -> Map {
    let wt = store.get(layer.w).value.shape().to_vec();
    let (cout, cg, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
    let w = values(store, layer.w);
    let b = values(store, layer.b);
    let s = layer.spec;
    let (ph, pw) = s.pad;
    let (sh, sw) = s.stride;
    let ho = (x.h + 2 * ph - kh) / sh + 1;
    let wo = (x.w + 2 * pw - kw) / sw + 1;
    let per_group_out = cout / s.groups;
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let g = o / per_group_out;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for ci in 0..cg {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as i64 - ph as i64;
                            let ix = (ox * sw + kx) as i64 - pw as i64;
                            acc += w[((o * cg + ci) * kh + ky) * kw + kx] * x.at(g * cg + ci, iy, ix);
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Map { c: cout, h: ho, w: wo, data: out }
}

pub fn relu(mut x: Map) -> Map {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn linear(x: &[f64], store: &ParamStore, layer: &Linear) -> Vec<f64> {
    let shape = store.get(layer.w).value.shape().to_vec();
    let (dout, din) = (shape[0], shape[1]);
    let w = values(store, layer.w);
    let b = values(store, layer.b);
    (0..dout).map(|o| b[o] + (0..din).map(|i| w[o * din + i] * x[i]).sum::<f64>()).collect()
}

fn transpose(x: &Map) -> Map {
    let mut data = vec![0.0; x.data.len()];
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                data[(c * x.w + xx) * x.h + y] = x.data[(c * x.h + y) * x.w + xx];
            }
        }
    }
    Map { c: x.c, h: x.w, w: x.h, data }
}

/// One side's network on a single pooled feature `[d, k, k]`; returns per-category σ.
pub fn bpn_side(store: &ParamStore, net: &SideNet, cfg: &BpnConfig, feature: &Map, side: Side) -> Vec<f64> {
    let x = if side.is_vertical() { feature.clone() } else { transpose(feature) };
    let x = relu(conv(&x, store, &net.conv1));
    let f = relu(conv(&x, store, &net.conv2));
    let a = conv(&conv(&f, store, &net.att_group), store, &net.att_proj);
    let (k_h, k_w) = (f.h, f.w);
    // softmax over rows, per column
    let mut att = vec![0.0; k_h * k_w];
    for col in 0..k_w {
        let m = (0..k_h).map(|r| a.data[r * k_w + col]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k_h).map(|r| (a.data[r * k_w + col] - m).exp()).sum();
        for r in 0..k_h {
            att[r * k_w + col] = (a.data[r * k_w + col] - m).exp() / z;
        }
    }
    let mut v = vec![0.0; f.c * k_w];
    for c in 0..f.c {
        for col in 0..k_w {
            v[c * k_w + col] = (0..k_h).map(|r| f.data[(c * k_h + r) * k_w + col] * att[r * k_w + col]).sum();
        }
    }
    let v = Map { c: f.c, h: 1, w: k_w, data: v };
    let v = relu(conv(&v, store, &net.conv3));
    let v = relu(conv(&v, store, &net.conv4));
    debug_assert_eq!(v.data.len(), cfg.channels * cfg.pool);
    linear(&v.data, store, &net.fc)
}

/// Stage-1 head on one pooled feature: `(logits, deltas)`.
pub fn stage1_head(store: &ParamStore, layers: &[Linear; 4], pooled: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let relu_v = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let h = relu_v(linear(pooled, store, &layers[0]));
    let h = relu_v(linear(&h, store, &layers[1]));
    (linear(&h, store, &layers[2]), linear(&h, store, &layers[3]))
}

/// Per-image, per-category greedy matching by exhaustive candidate search.
/// Returns, for score-ordered detections, `Some(true)` TP, `Some(false)` FP, `None` ignored.
fn brute_match(dets: &[(BBox, f64)], gts: &[BBox], ignore: &[bool], t: f64, range: AreaRange) -> Vec<Option<bool>> {
    let thresh = t.min(1.0 - 1e-10);
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for (d, _) in dets {
        let pick = |want_ignored: bool, used: &[bool]| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            // among equal IoU the later gt (in non-ignored-first order) wins
            let mut order: Vec<usize> = (0..gts.len()).filter(|&g| ignore[g] == want_ignored).collect();
            order.sort();
            for g in order {
                let o = iou(d, &gts[g]);
                if used[g] || o < thresh {
                    continue;
                }
                if best.is_none_or(|(_, bo)| o >= bo) {
                    best = Some((g, o));
                }
            }
            best.map(|b| b.0)
        };
        let m = pick(false, &used).or_else(|| pick(true, &used));
        out.push(match m {
            Some(g) => {
                used[g] = true;
                if ignore[g] {
                    None
                } else {
                    Some(true)
                }
            }
            None if !range.contains(d.area()) => None,
            None => Some(false),
        });
    }
    out
}

/// Interpolated precision by definition: `max{precision_k : recall_k ≥ r}`.
fn brute_ap(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let pr: Vec<(f64, f64)> = (0..flags.len())
        .map(|k| {
            let tp = flags[..=k].iter().filter(|f| **f).count() as f64;
            (tp / num_gt as f64, tp / (k + 1) as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..101 {
        let rt = r as f64 / 100.0;
        sum += pr.iter().filter(|(rec, _)| *rec >= rt).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

fn mean(v: &[Option<f64>]) -> Option<f64> {
    let p: Vec<f64> = v.iter().flatten().copied().collect();
    if p.is_empty() {
        None
    } else {
        Some(p.iter().sum::<f64>() / p.len() as f64)
    }
}

/// `(mAP, AP50, AP75, AP_small, AP_medium, AP_large)` by exhaustive evaluation.
pub fn brute_coco(images: &[ImageEval], num_categories: usize) -> [Option<f64>; 6] {
    let bucket = |range: AreaRange, t: f64| -> Option<f64> {
        let per_cat: Vec<Option<f64>> = (0..num_categories)
            .map(|c| {
                let mut all: Vec<(f64, bool)> = Vec::new();
                let mut n = 0;
                for im in images {
                    let gts: Vec<BBox> = im.gts.iter().filter(|g| g.category == c).map(|g| g.bbox).collect();
                    let ignore: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
                    n += ignore.iter().filter(|i| !**i).count();
                    let mut dets: Vec<(BBox, f64)> = im.dets.iter().filter(|d| d.category == c).map(|d| (d.bbox, d.score)).collect();
                    dets.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                    for (d, m) in dets.iter().zip(brute_match(&dets, &gts, &ignore, t, range)) {
                        if let Some(tp) = m {
                            all.push((d.1, tp));
                        }
                    }
                }
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                brute_ap(&all.iter().map(|a| a.1).collect::<Vec<_>>(), n)
            })
            .collect();
        mean(&per_cat)
    };
    let over_t = |range: AreaRange| mean(&IOU_THRESHOLDS.iter().map(|&t| bucket(range, t)).collect::<Vec<_>>());
    [
        over_t(AreaRange::ALL),
        bucket(AreaRange::ALL, 0.5),
        bucket(AreaRange::ALL, 0.75),
        over_t(AreaRange::SMALL),
        over_t(AreaRange::MEDIUM),
        over_t(AreaRange::LARGE),
    ]
}

/// Greedy NMS by its definition: repeatedly keep the best remaining box and drop overlapping same-category boxes.
pub fn brute_nms(dets: &[crate::boxgeom::Scored], thresh: f64) -> Vec<crate::boxgeom::Scored> {
    let mut rest: Vec<(usize, crate::boxgeom::Scored)> = dets.iter().copied().enumerate().collect();
    let mut keep = Vec::new();
    while !rest.is_empty() {
        let mut bi = 0;
        for (k, (i, d)) in rest.iter().enumerate() {
            let (bj, bd) = rest[bi];
            if d.score > bd.score || (d.score == bd.score && *i < bj) {
                bi = k;
            }
        }
        let (_, best) = rest.remove(bi);
        rest.retain(|(_, d)| d.category != best.category || iou(&d.bbox, &best.bbox) <= thresh);
        keep.push(best);
    }
    keep
}
