use super::{inference_grid, Detector, RefineItem, Result};
use crate::boxgeom::{clip_to_image, decode_delta, nms_indices, BBox, Scored};
use crate::evalkit::StagedDetection;
use crate::pyramid::assign_level;
use crate::tensor::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A detection with its box after every stage (`boxes[0]` = stage 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub boxes: Vec<BBox>,
    pub category: usize,
    pub score: f64,
    /// Some refinement stage left the box unchanged because its areas or decode were degenerate.
    pub passed_through: bool,
}

impl Detection {
    pub fn final_box(&self) -> BBox {
        *self.boxes.last().expect("at least one stage")
    }

    pub fn staged(&self) -> StagedDetection {
        StagedDetection { boxes: self.boxes.clone(), score: self.score, category: self.category }
    }
}

/// Grid proposals → stage-1 scores and deltas → threshold, per-category NMS,
/// top-k → refinement of each survivor under its top category.
pub fn infer(det: &Detector, image: &Tensor<f32>) -> Result<Vec<Detection>> {
    let cfg = &det.config;
    let icfg = &cfg.inference;
    let ncat = cfg.num_categories;
    let img = cfg.image_size as f64;
    let mut g = Graph::<f32>::new();
    let p = det.store.bind(&mut g);
    let x = det.input(&mut g, &[image])?;
    let pyr = det.backbone_forward(&mut g, &p, x)?;

    let mut grid: Vec<(usize, BBox, usize)> =
        inference_grid(img, icfg).into_iter().map(|b| Ok((0, b, assign_level(&b, &cfg.levels)?))).collect::<Result<_>>()?;
    grid.sort_by_key(|r| r.2);
    let pooled = det.pool(&mut g, &pyr, &grid)?;
    let (logits, deltas) = det.stage1_forward(&mut g, &p, pooled)?;
    let lv = g.value(logits).data();
    let dv = g.value(deltas).data();

    let mut cands: Vec<Scored> = Vec::new();
    let mut cand_level: Vec<usize> = Vec::new();
    for (r, roi) in grid.iter().enumerate() {
        let row = &lv[r * (ncat + 1)..(r + 1) * (ncat + 1)];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
        let z: f64 = row.iter().map(|v| (*v as f64 - m).exp()).sum();
        let (cat, best) = row[..ncat].iter().enumerate().fold((0, f32::NEG_INFINITY), |a, (c, v)| if *v > a.1 { (c, *v) } else { a });
        let score = (best as f64 - m).exp() / z;
        if score <= icfg.score_threshold {
            continue;
        }
        let base = r * 4 * ncat + 4 * cat;
        let d = [0, 1, 2, 3].map(|k| dv[base + k] as f64);
        let Ok(b) = decode_delta(&roi.1, &d, cfg.loss.delta_norm).and_then(|b| clip_to_image(&b, img, img)) else {
            continue;
        };
        cands.push(Scored { bbox: b, score, category: cat });
        cand_level.push(roi.2);
    }
    let keep: Vec<usize> = nms_indices(&cands, icfg.nms_iou).into_iter().take(icfg.max_detections).collect();
    let mut dets: Vec<Detection> = keep
        .iter()
        .map(|&i| Detection { boxes: vec![cands[i].bbox], category: cands[i].category, score: cands[i].score, passed_through: false })
        .collect();
    let mut items: Vec<RefineItem> =
        keep.iter().map(|&i| RefineItem { batch: 0, bbox: cands[i].bbox, level: cand_level[i], category: cands[i].category }).collect();

    for t in 1..cfg.num_stages() {
        if items.is_empty() {
            break;
        }
        // pool in level order, then scatter back
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by_key(|&i| items[i].level);
        let sorted: Vec<RefineItem> = order.iter().map(|&i| items[i]).collect();
        let fwd = det.refine_forward(&mut g, &p, &pyr, &sorted, t)?;
        let next = det.next_boxes(&g, &sorted, &fwd);
        for (k, (item, passed)) in next.into_iter().enumerate() {
            let i = order[k];
            items[i] = item;
            dets[i].boxes.push(item.bbox);
            dets[i].passed_through |= passed;
        }
    }
    Ok(dets)
}

/// [`infer`] over many images in parallel; output order follows input order.
pub fn infer_batch(det: &Detector, images: &[Tensor<f32>]) -> Result<Vec<Vec<Detection>>> {
    images.par_iter().map(|im| infer(det, im)).collect()
}
