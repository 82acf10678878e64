//! Detection matching, 101-point interpolated AP and COCO-style summaries.

use crate::boxgeom::{iou, BBox};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt::Write as _;

/// IoU thresholds 0.50:0.05:0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;
const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetBox {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub dets: Vec<DetBox>,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Tp,
    Fp,
    /// Matched an ignored gt or fell outside the evaluated area range.
    Ignored,
}

/// Area range `[lo, hi]` of one size bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { lo: 0.0, hi: f64::INFINITY };
    pub const SMALL: AreaRange = AreaRange { lo: 0.0, hi: SMALL_AREA };
    pub const MEDIUM: AreaRange = AreaRange { lo: SMALL_AREA, hi: MEDIUM_AREA };
    pub const LARGE: AreaRange = AreaRange { lo: MEDIUM_AREA, hi: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy matching of score-sorted detections against ground truth with ignore flags.
///
/// Each detection takes the highest-IoU unmatched gt with IoU ≥ `iou_t`, preferring
/// non-ignored gts. Detections matching an ignored gt, or unmatched detections whose
/// area is outside `range`, are [`Match::Ignored`].
pub fn match_with_ignore(dets: &[BBox], gts: &[BBox], gt_ignore: &[bool], iou_t: f64, range: AreaRange) -> Vec<Match> {
    // non-ignored gts first, stable
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gt_ignore[g]);
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best = iou_t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(prev) = m {
                    if !gt_ignore[prev] && gt_ignore[g] {
                        break;
                    }
                }
                let o = iou(d, &gts[g]);
                if o < best {
                    continue;
                }
                best = o;
                m = Some(g);
            }
            match m {
                Some(g) => {
                    taken[g] = true;
                    if gt_ignore[g] {
                        Match::Ignored
                    } else {
                        Match::Tp
                    }
                }
                None if !range.contains(d.area()) => Match::Ignored,
                None => Match::Fp,
            }
        })
        .collect()
}

/// TP/FP flags for score-sorted detections of one image and category.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_t: f64) -> Vec<bool> {
    match_with_ignore(dets, gts, &vec![false; gts.len()], iou_t, AreaRange::ALL)
        .into_iter()
        .map(|m| m == Match::Tp)
        .collect()
}

/// Precision envelope sampled at recalls `0.00:0.01:1.00`.
///
/// `None` when `num_gt == 0` (category absent, excluded from averages).
pub fn interpolated_precision(flags: &[bool], num_gt: usize) -> Option<Vec<f64>> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let samples = (0..RECALL_POINTS)
        .map(|r| {
            let rt = r as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < rt);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    Some(samples)
}

pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    interpolated_precision(flags, num_gt).map(|p| p.iter().sum::<f64>() / RECALL_POINTS as f64)
}

/// Score-ordered match flags of one category pooled over all images.
fn category_flags(images: &[ImageEval], category: usize, iou_t: f64, range: AreaRange) -> (Vec<bool>, usize) {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for im in images {
        let gts: Vec<BBox> = im.gts.iter().filter(|g| g.category == category).map(|g| g.bbox).collect();
        let ignore: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
        num_gt += ignore.iter().filter(|i| !**i).count();
        let mut dets: Vec<&DetBox> = im.dets.iter().filter(|d| d.category == category).collect();
        dets.sort_by(|a, b| desc(a.score, b.score));
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        for (d, m) in dets.iter().zip(match_with_ignore(&boxes, &gts, &ignore, iou_t, range)) {
            if m != Match::Ignored {
                scored.push((d.score, m == Match::Tp));
            }
        }
    }
    scored.sort_by(|a, b| desc(a.0, b.0));
    (scored.into_iter().map(|s| s.1).collect(), num_gt)
}

/// AP per category at one threshold and area range.
pub fn category_ap(images: &[ImageEval], num_categories: usize, iou_t: f64, range: AreaRange) -> Vec<Option<f64>> {
    (0..num_categories)
        .map(|c| {
            let (flags, n) = category_flags(images, c, iou_t, range);
            average_precision(&flags, n)
        })
        .collect()
}

fn mean_present(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

/// Precision envelope at 0.5 and 0.75 IoU, averaged over present categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Summary metrics; `None` marks a metric with no ground truth to score against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ap_per_threshold: Vec<Option<f64>>,
    pub per_category: Vec<CategoryAp>,
    pub pr_curves: Vec<PrCurve>,
}

fn bucket_map(images: &[ImageEval], n: usize, range: AreaRange) -> (Option<f64>, Vec<Vec<Option<f64>>>) {
    let per_t: Vec<Vec<Option<f64>>> = IOU_THRESHOLDS.iter().map(|&t| category_ap(images, n, t, range)).collect();
    // average over categories, then thresholds
    let cat_means: Vec<Option<f64>> = per_t.iter().map(|v| mean_present(v)).collect();
    (mean_present(&cat_means), per_t)
}

fn pr_curve(images: &[ImageEval], n: usize, iou_t: f64) -> PrCurve {
    let curves: Vec<Vec<f64>> = (0..n)
        .filter_map(|c| {
            let (flags, ng) = category_flags(images, c, iou_t, AreaRange::ALL);
            interpolated_precision(&flags, ng)
        })
        .collect();
    let precision = (0..RECALL_POINTS)
        .map(|r| if curves.is_empty() { 0.0 } else { curves.iter().map(|c| c[r]).sum::<f64>() / curves.len() as f64 })
        .collect();
    PrCurve { iou: iou_t, recall: (0..RECALL_POINTS).map(|r| r as f64 / 100.0).collect(), precision }
}

pub fn coco_map(images: &[ImageEval], categories: &[String]) -> EvalReport {
    let n = categories.len();
    let (map, per_t) = bucket_map(images, n, AreaRange::ALL);
    let ap_per_threshold: Vec<Option<f64>> = per_t.iter().map(|v| mean_present(v)).collect();
    let per_category = categories
        .iter()
        .enumerate()
        .map(|(c, name)| CategoryAp {
            name: name.clone(),
            ap: mean_present(&per_t.iter().map(|v| v[c]).collect::<Vec<_>>()),
            ap50: per_t[0][c],
            ap75: per_t[5][c],
        })
        .collect();
    EvalReport {
        map,
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        ap_small: bucket_map(images, n, AreaRange::SMALL).0,
        ap_medium: bucket_map(images, n, AreaRange::MEDIUM).0,
        ap_large: bucket_map(images, n, AreaRange::LARGE).0,
        ap_per_threshold,
        per_category,
        pr_curves: vec![pr_curve(images, n, 0.5), pr_curve(images, n, 0.75)],
    }
}

/// A detection with its box after every stage (`boxes[0]` = stage 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedDetection {
    pub boxes: Vec<BBox>,
    pub score: f64,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageIou {
    /// Mean IoU against the matched gt, one entry per stage.
    pub mean_iou: Vec<f64>,
    pub matched: usize,
}

/// Matches final-stage boxes to same-category gts at IoU 0.5 (greedy by score)
/// and averages the IoU of every stage's box over the matched pairs.
///
/// `None` when nothing matches.
pub fn stage_iou_stats(images: &[(Vec<StagedDetection>, Vec<GtBox>)]) -> Option<StageIou> {
    let stages = images.iter().flat_map(|(d, _)| d.first()).map(|d| d.boxes.len()).next()?;
    let mut sums = vec![0.0; stages];
    let mut matched = 0;
    for (dets, gts) in images {
        let mut order: Vec<&StagedDetection> = dets.iter().collect();
        order.sort_by(|a, b| desc(a.score, b.score));
        let mut taken = vec![false; gts.len()];
        for d in order {
            let last = d.boxes[stages - 1];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.category != d.category {
                    continue;
                }
                let o = iou(&last, &gt.bbox);
                if o >= 0.5 && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                matched += 1;
                for (s, b) in d.boxes.iter().enumerate() {
                    sums[s] += iou(b, &gts[g].bbox);
                }
            }
        }
    }
    (matched > 0).then(|| StageIou { mean_iou: sums.iter().map(|s| s / matched as f64).collect(), matched })
}

/// Collapses staged detections onto one stage for AP evaluation.
pub fn stage_view(images: &[(Vec<StagedDetection>, Vec<GtBox>)], stage: usize) -> Vec<ImageEval> {
    images
        .iter()
        .map(|(dets, gts)| ImageEval {
            dets: dets.iter().map(|d| DetBox { bbox: d.boxes[stage], score: d.score, category: d.category }).collect(),
            gts: gts.clone(),
        })
        .collect()
}

/// Stage-wise evaluation written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    /// Metrics of the final-stage boxes.
    pub final_stage: EvalReport,
    /// Metrics of every stage's boxes, stage 1 first.
    pub stages: Vec<EvalReport>,
    pub stage_iou: Option<StageIou>,
    pub num_images: usize,
    pub num_detections: usize,
}

pub fn evaluate_stages(images: &[(Vec<StagedDetection>, Vec<GtBox>)], categories: &[String]) -> FullReport {
    let num_stages = images.iter().flat_map(|(d, _)| d.first()).map(|d| d.boxes.len()).next().unwrap_or(1);
    let stages: Vec<EvalReport> = (0..num_stages).map(|s| coco_map(&stage_view(images, s), categories)).collect();
    FullReport {
        final_stage: stages[num_stages - 1].clone(),
        stages,
        stage_iou: stage_iou_stats(images),
        num_images: images.len(),
        num_detections: images.iter().map(|(d, _)| d.len()).sum(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

/// Flat `metric,value` rows.
pub fn report_csv(r: &FullReport) -> String {
    let mut out = String::from("metric,value\n");
    let mut row = |k: String, v: String| {
        let _ = writeln!(out, "{k},{v}");
    };
    let f = &r.final_stage;
    row("mAP".into(), fmt_opt(f.map));
    row("AP50".into(), fmt_opt(f.ap50));
    row("AP75".into(), fmt_opt(f.ap75));
    row("AP_small".into(), fmt_opt(f.ap_small));
    row("AP_medium".into(), fmt_opt(f.ap_medium));
    row("AP_large".into(), fmt_opt(f.ap_large));
    for (t, ap) in IOU_THRESHOLDS.iter().zip(&f.ap_per_threshold) {
        row(format!("AP@{t:.2}"), fmt_opt(*ap));
    }
    for c in &f.per_category {
        row(format!("AP[{}]", c.name), fmt_opt(c.ap));
    }
    for (s, st) in r.stages.iter().enumerate() {
        row(format!("stage{}_mAP", s + 1), fmt_opt(st.map));
        row(format!("stage{}_AP75", s + 1), fmt_opt(st.ap75));
    }
    if let Some(si) = &r.stage_iou {
        for (s, m) in si.mean_iou.iter().enumerate() {
            row(format!("stage{}_mIoU", s + 1), format!("{m:.6}"));
        }
        row("matched".into(), si.matched.to_string());
    }
    row("images".into(), r.num_images.to_string());
    row("detections".into(), r.num_detections.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cats() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn exact_det_is_tp() {
        let g = b(0., 0., 10., 10.);
        assert_eq!(match_detections(&[g], &[g], 0.5), vec![true]);
    }

    #[test]
    fn duplicate_det_is_fp() {
        let g = b(0., 0., 10., 10.);
        assert_eq!(match_detections(&[g, b(0., 0., 10., 9.)], &[g], 0.5), vec![true, false]);
    }

    #[test]
    fn ap_reference_values() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // envelope [1, 2/3, 2/3] over recalls [.5, .5, 1]: 51 samples at 1, 50 at 2/3
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - 253.0 / 303.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![GtBox { bbox: b(0., 0., 40., 40.), category: 0 }, GtBox { bbox: b(50., 50., 60., 70.), category: 1 }];
        let perfect = ImageEval { dets: gts.iter().map(|g| DetBox { bbox: g.bbox, score: 1.0, category: g.category }).collect(), gts: gts.clone() };
        let r = coco_map(&[perfect], &cats());
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_medium, Some(1.0));
        assert_eq!(r.ap_large, None);
        let r = coco_map(&[ImageEval { dets: vec![], gts }], &cats());
        assert_eq!(r.map, Some(0.0));
    }

    #[test]
    fn absent_category_is_excluded() {
        let g = GtBox { bbox: b(0., 0., 40., 40.), category: 0 };
        let im = ImageEval { dets: vec![DetBox { bbox: g.bbox, score: 0.9, category: 0 }], gts: vec![g] };
        let r = coco_map(&[im], &cats());
        assert_eq!(r.per_category[1].ap, None);
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn stage_stats() {
        let g = b(10., 10., 50., 50.);
        let d1 = b(12., 10., 50., 50.);
        let det = StagedDetection { boxes: vec![d1, g, g], score: 0.9, category: 0 };
        let s = stage_iou_stats(&[(vec![det], vec![GtBox { bbox: g, category: 0 }])]).unwrap();
        assert_eq!(s.matched, 1);
        assert!((s.mean_iou[0] - iou(&d1, &g)).abs() < 1e-12);
        assert_eq!(&s.mean_iou[1..], &[1.0, 1.0]);
        assert!(stage_iou_stats(&[(vec![], vec![])]).is_none());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let g = GtBox { bbox: b(0., 0., 40., 40.), category: 0 };
        let det = StagedDetection { boxes: vec![g.bbox; 3], score: 1.0, category: 0 };
        let r = evaluate_stages(&[(vec![det], vec![g])], &cats());
        let csv = report_csv(&r);
        assert!(csv.starts_with("metric,value\nmAP,1.000000\n"));
        assert!(csv.contains("stage3_mIoU,1.000000"));
    }
}
